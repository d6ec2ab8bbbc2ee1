"""Training loop.

One step runs, in order: ``eg_updates_per_step`` updates of the summed
encoder + generator objective, then the discriminator, then the code
discriminator. Every network has its own Adam optimizer.

Randomness is derived from ``(seed, step)`` rather than threaded through a
stateful stream, so a run resumed from a checkpoint continues bit-for-bit.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from . import losses
from .checkpoint import save_checkpoint
from .config import ModelConfig, TrainConfig
from .data import Dataset, batch_iterator
from .losses import DivergenceError, LossBundle
from .networks import AlphaGAN, init_params

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "l_eg", "l_d", "l_c", "recon_l1", "gp_d", "gp_c", "wall_time")

# stream ids for per-step seed derivation
_STREAM_STEP = 1
_STREAM_EPOCH = 2
_STREAM_SAMPLES = 3


def derive_seed(*key: int) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1, np.uint64)[0] >> np.uint64(1))


def torch_rng(*key: int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(*key))


@dataclass
class TrainState:
    model: AlphaGAN
    optimizers: dict[str, torch.optim.Adam]
    train_config: TrainConfig
    model_config: ModelConfig
    global_step: int = 0
    update_counts: dict[str, int] = field(default_factory=lambda: {"eg": 0, "d": 0, "c": 0})

    @property
    def rng_key(self) -> tuple[int, int]:
        """Everything the next step's randomness depends on."""
        return self.train_config.seed, self.global_step


@dataclass
class StepReport:
    step: int
    l_eg: float
    l_d: float
    l_c: float
    recon_l1: float
    gp_d: float
    gp_c: float
    wall_time: float

    def row(self) -> list:
        return [getattr(self, c) for c in LOG_COLUMNS]


def make_optimizer(params, tc: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=tc.learning_rate, betas=(tc.adam_beta1, tc.adam_beta2),
                            eps=tc.adam_eps)


def new_state(tc: TrainConfig, mc: ModelConfig, initialize: bool = True) -> TrainState:
    model = init_params(mc, tc) if initialize else AlphaGAN(mc, tc)
    optimizers = {name: make_optimizer(net.parameters(), tc) for name, net in model.nets().items()}
    return TrainState(model, optimizers, tc, mc)


@contextmanager
def fixed_norm_stats(*modules: nn.Module):
    """Batch norm keeps normalizing with batch statistics but leaves its
    running averages untouched."""
    norms = [m for mod in modules for m in mod.modules()
             if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    flags = [m.track_running_stats for m in norms]
    for m in norms:
        m.track_running_stats = False
    try:
        yield
    finally:
        for m, flag in zip(norms, flags):
            m.track_running_stats = flag


@contextmanager
def frozen(*modules: nn.Module):
    """Stop gradients into ``modules`` and keep their normalization running
    statistics fixed."""
    params = [(p, p.requires_grad) for mod in modules for p in mod.parameters()]
    for p, _ in params:
        p.requires_grad_(False)
    try:
        with fixed_norm_stats(*modules):
            yield
    finally:
        for p, flag in params:
            p.requires_grad_(flag)


def _latent(n: int, tc: TrainConfig, gen: torch.Generator, dtype) -> torch.Tensor:
    return torch.randn(n, tc.latent_size, generator=gen, dtype=dtype)


def _checked(value: torch.Tensor, term: str, step: int) -> float:
    v = float(value.detach())
    if not np.isfinite(v):
        raise DivergenceError(term, step)
    return v


def _eg_update(state: TrainState, x_real: torch.Tensor, gen: torch.Generator,
               update_encoder: bool, out: LossBundle) -> None:
    tc, m = state.train_config, state.model
    G, D, E, C = m.generator, m.discriminator, m.encoder, m.code_discriminator
    alpha = tc.mode != "wgan-gp-only"
    vanilla = tc.mode == "alpha-gan-vanilla"
    step = state.global_step
    z_r = _latent(len(x_real), tc, gen, x_real.dtype)

    idle = (D, C) if update_encoder else (D, C, E)
    with frozen(*idle):
        x_rand = G(z_r)
        d_rand = D(x_rand)
        if not alpha:
            l_g = losses.loss_generator_wgan_only(d_rand)
            l_e = torch.zeros(())
            recon = torch.zeros(())
        else:
            z_e = E(x_real)
            # sampling feeds G prior codes only, so its running statistics
            # must not absorb the differently scaled encoder codes
            with fixed_norm_stats(G):
                x_rec = G(z_e)
            d_rec = D(x_rec)
            c_fake = C(z_e)
            recon = losses.reconstruction_l1(x_real, x_rec)
            if vanilla:
                l_g = (losses.vanilla_generator_loss(torch.sigmoid(d_rand))
                       + losses.vanilla_generator_loss(torch.sigmoid(d_rec))
                       + tc.lambda2 * recon)
                l_e = losses.vanilla_generator_loss(torch.sigmoid(c_fake))
            else:
                l_g = losses.loss_generator(d_rand, d_rec, x_real, x_rec, tc.lambda2)
                l_e = losses.loss_encoder(c_fake)
        l_eg = l_g + l_e
        out.l_g = _checked(l_g, "l_g", step)
        out.l_e = _checked(l_e, "l_e", step)
        out.l_eg = _checked(l_eg, "l_eg", step)
        out.recon_l1 = _checked(recon, "recon_l1", step)

        targets = ["generator"] + (["encoder"] if alpha and update_encoder else [])
        for name in ("generator", "encoder"):
            state.optimizers[name].zero_grad(set_to_none=True)
        l_eg.backward()
        for name in targets:
            state.optimizers[name].step()
    state.update_counts["eg"] += 1


def _d_update(state: TrainState, x_real: torch.Tensor, gen: torch.Generator, out: LossBundle) -> None:
    tc, m = state.train_config, state.model
    G, D, E = m.generator, m.discriminator, m.encoder
    alpha = tc.mode != "wgan-gp-only"
    step = state.global_step
    z_r = _latent(len(x_real), tc, gen, x_real.dtype)
    with torch.no_grad(), frozen(G, E):
        x_rand = G(z_r)
        x_rec = G(E(x_real)) if alpha else None

    d_real = D(x_real)
    d_rand = D(x_rand)
    gp = torch.zeros(())
    if tc.mode == "alpha-gan-vanilla":
        d_rec = D(x_rec)
        p_real = torch.sigmoid(d_real)
        l_d = (losses.loss_vanilla_gan(p_real, torch.sigmoid(d_rand))[0]
               + losses.loss_vanilla_gan(p_real, torch.sigmoid(d_rec))[0])
    else:
        gp = losses.gradient_penalty(D, x_real, x_rand, gen)
        if alpha:
            d_rec = D(x_rec)
            if tc.gp_both_fakes:
                gp = gp + losses.gradient_penalty(D, x_real, x_rec, gen)
            l_d = losses.loss_discriminator(d_real, d_rand, d_rec, gp, tc.lambda1)
        else:
            l_d = losses.loss_discriminator_wgan_only(d_real, d_rand, gp, tc.lambda1)
    out.l_d = _checked(l_d, "l_d", step)
    out.gp_d = _checked(gp, "gp_d", step)
    opt = state.optimizers["discriminator"]
    opt.zero_grad(set_to_none=True)
    l_d.backward()
    opt.step()
    state.update_counts["d"] += 1


def _c_update(state: TrainState, x_real: torch.Tensor, gen: torch.Generator, out: LossBundle) -> None:
    tc, m = state.train_config, state.model
    E, C = m.encoder, m.code_discriminator
    step = state.global_step
    with torch.no_grad(), frozen(E):
        z_e = E(x_real)
    z_r = _latent(len(x_real), tc, gen, x_real.dtype)
    c_fake = C(z_e)
    c_real = C(z_r)
    gp = torch.zeros(())
    if tc.mode == "alpha-gan-vanilla":
        l_c = losses.loss_vanilla_gan(torch.sigmoid(c_real), torch.sigmoid(c_fake))[0]
    else:
        gp = losses.gradient_penalty(C, z_r, z_e, gen)
        l_c = losses.loss_code_discriminator(c_fake, c_real, gp, tc.lambda1)
    out.l_c = _checked(l_c, "l_c", step)
    out.gp_c = _checked(gp, "gp_c", step)
    opt = state.optimizers["code_discriminator"]
    opt.zero_grad(set_to_none=True)
    l_c.backward()
    opt.step()
    state.update_counts["c"] += 1


def train_step(state: TrainState, batch: np.ndarray | torch.Tensor,
               generator: torch.Generator | None = None) -> tuple[TrainState, StepReport]:
    """Advance ``state`` by one step on ``batch`` (shape (B, V, V, V)); mutates in place."""
    tc = state.train_config
    if len(batch) != tc.batch_size:
        raise ValueError(f"batch has {len(batch)} volumes, configured batch size is {tc.batch_size}")
    t0 = time.perf_counter()
    if generator is None:
        generator = torch_rng(tc.seed, _STREAM_STEP, state.global_step)
    dtype = next(state.model.parameters()).dtype
    x_real = torch.as_tensor(np.asarray(batch)).to(dtype).unsqueeze(1)
    state.model.train()

    out = LossBundle()
    for i in range(tc.eg_updates_per_step):
        update_encoder = i == 0 or tc.repeat_update_target == "encoder-generator"
        _eg_update(state, x_real, generator, update_encoder, out)
    for _ in range(tc.d_updates_per_step):
        _d_update(state, x_real, generator, out)
    if tc.mode != "wgan-gp-only":
        for _ in range(tc.c_updates_per_step):
            _c_update(state, x_real, generator, out)

    state.global_step += 1
    report = StepReport(state.global_step, out.l_eg, out.l_d, out.l_c, out.recon_l1,
                        out.gp_d, out.gp_c, time.perf_counter() - t0)
    return state, report


class StepBatches:
    """Maps a global step to its batch: epoch ``step // n_batches`` is shuffled
    (and augmented) with a seed derived from the epoch index."""

    def __init__(self, dataset: Dataset, tc: TrainConfig):
        self.dataset = dataset
        self.tc = tc
        self.per_epoch = len(dataset) // tc.batch_size
        if self.per_epoch == 0:
            raise ValueError(f"dataset has {len(dataset)} volumes, fewer than batch size {tc.batch_size}")
        self._epoch = -1
        self._batches: list[np.ndarray] = []

    def __call__(self, step: int) -> np.ndarray:
        epoch, idx = divmod(step, self.per_epoch)
        if epoch != self._epoch:
            rng = np.random.default_rng(derive_seed(self.tc.seed, _STREAM_EPOCH, epoch))
            self._batches = list(batch_iterator(self.dataset, self.tc.batch_size, rng,
                                                self.tc.augment))
            self._epoch = epoch
        return self._batches[idx]


def checkpoint_path(out_dir: str | os.PathLike, step: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"step_{step:07d}"


def train(tc: TrainConfig, mc: ModelConfig, dataset: Dataset, out_dir: str | os.PathLike | None = None,
          state: TrainState | None = None,
          callback: Callable[[TrainState, StepReport], None] | None = None,
          log_every: int = 100) -> TrainState:
    """Run until ``tc.total_steps``; resumes from ``state`` when given.

    With ``out_dir`` set, appends one row per step to ``train_log.csv`` and
    writes checkpoints every ``checkpoint_interval`` steps and at the end.
    """
    if dataset.volume_size != tc.volume_size:
        raise ValueError(f"dataset volumes are {dataset.volume_size}^3, config expects {tc.volume_size}^3")
    state = new_state(tc, mc) if state is None else state
    batches = StepBatches(dataset, tc)
    writer = None
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        fresh = not log_path.exists()
        log_file = open(log_path, "a", newline="")
        writer = csv.writer(log_file)
        if fresh:
            writer.writerow(LOG_COLUMNS)
    try:
        last_saved = None
        while state.global_step < tc.total_steps:
            batch = batches(state.global_step)
            state, report = train_step(state, batch)
            if writer is not None:
                writer.writerow(report.row())
            if callback is not None:
                callback(state, report)
            if log_every and state.global_step % log_every == 0:
                log.info("step %d  l_eg %.4f  l_d %.4f  l_c %.4f  recon %.4f",
                         report.step, report.l_eg, report.l_d, report.l_c, report.recon_l1)
            if out_dir is not None and state.global_step % tc.checkpoint_interval == 0:
                log_file.flush()
                last_saved = save_checkpoint(state, checkpoint_path(out_dir, state.global_step))
        if out_dir is not None and (last_saved is None
                                    or last_saved != checkpoint_path(out_dir, state.global_step)):
            save_checkpoint(state, checkpoint_path(out_dir, state.global_step))
    finally:
        if log_file is not None:
            log_file.close()
    return state


@torch.no_grad()
def generate_samples(state: TrainState, n: int, generator: torch.Generator | int | None = None,
                     chunk: int = 16) -> np.ndarray:
    """``n`` generator outputs from prior codes, evaluation-mode normalization.

    Returns a float32 array of shape (n, V, V, V).
    """
    tc = state.train_config
    V = tc.volume_size
    if n == 0:
        return np.zeros((0, V, V, V), dtype=np.float32)
    if generator is None or isinstance(generator, int):
        generator = torch_rng(tc.seed if generator is None else generator, _STREAM_SAMPLES)
    G = state.model.generator
    was_training = G.training
    G.eval()
    dtype = next(G.parameters()).dtype
    out = []
    try:
        for start in range(0, n, chunk):
            z = _latent(min(chunk, n - start), tc, generator, dtype)
            out.append(G(z)[:, 0].float().numpy())
    finally:
        G.train(was_training)
    return np.concatenate(out)
