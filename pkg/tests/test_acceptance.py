"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 6, 7 and 9 train real models at 32^3 and dominate the runtime
(roughly an hour on a single CPU core). The desk runs use a narrowed network
(critic 8-16-32-64, generator base 64, code critic width 512); every other
hyperparameter is at its default.
"""

import csv
import dataclasses
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn

from conftest import TINY_MODEL
from oracles import fd_relative_error, ms_ssim_reference
from volgen import losses as L
from volgen.checkpoint import load_checkpoint, save_checkpoint
from volgen.config import ModelConfig, TrainConfig
from volgen.data import make_phantom, make_phantom_dataset
from volgen.losses import LossBundle
from volgen.metrics import (MetricReport, generator_sampler, mmd2_batchwise, mmd_score,
                            ms_ssim_diversity, ms_ssim_pair)
from volgen.networks import AlphaGAN, init_params
from volgen.trainer import (LOG_COLUMNS, _c_update, _d_update, _eg_update, new_state, torch_rng,
                            train, train_step)

DESK_MODEL = ModelConfig(critic_channels=(8, 16, 32, 64), generator_channels=64, code_hidden=512)
DESK_STEPS = 2000
RESULTS = Path(__file__).resolve().parent.parent / "acceptance_results.json"


def _record(n, ok, detail, capsys, blocking=True):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    with capsys.disabled():
        print("\n" + line)
    data = json.loads(RESULTS.read_text()) if RESULTS.exists() else {}
    data[str(n)] = {"pass": bool(ok), "detail": detail}
    RESULTS.write_text(json.dumps(data, indent=2, sort_keys=True))
    if blocking:
        assert ok, line


def t(*v):
    return torch.tensor(v, dtype=torch.float64)


# ---------------------------------------------------------------------------

def test_criterion_1_loss_identities(capsys):
    t0 = time.perf_counter()
    checks = []
    c = t(0.4, 0.4, 0.4)
    const_gp = L.gradient_penalty(lambda x: x.sum(1) * 0 + 0.4, torch.rand(3, 4, dtype=torch.float64),
                                  torch.rand(3, 4, dtype=torch.float64))
    checks.append(abs(L.loss_discriminator(c, c, c, const_gp, 10.0).item() - 10.0))
    checks.append(abs(L.loss_discriminator(t(1, 1), t(0, 0), t(0, 0), 0.0, 10.0).item() + 2.0))
    x = torch.ones(2, 1, 4, 4, 4, dtype=torch.float64)
    checks.append(abs(L.loss_generator(t(0, 0), t(0, 0), x, -x, 10.0).item() - 20.0))
    checks.append(abs(L.loss_generator(t(1, 1), t(1, 1), x, x, 10.0).item() + 2.0))
    checks.append(abs(L.loss_code_discriminator(t(0, 0), t(1, 1), 0.0, 10.0).item() + 1.0))
    checks.append(abs(L.loss_code_discriminator(c, c, const_gp, 10.0).item() - 10.0))
    checks.append(abs(L.loss_encoder(t(3, 3)).item() + 3.0))
    rng = np.random.default_rng(0)
    for _ in range(200):
        dr, df, drec = (rng.normal(scale=10, size=5) for _ in range(3))
        gp, lam = rng.uniform(0, 3), 10.0
        a, b = rng.uniform(-1, 1, (5, 8)), rng.uniform(-1, 1, (5, 8))
        T = torch.from_numpy
        checks.append(abs(L.loss_discriminator(T(dr), T(df), T(drec), gp, lam).item()
                          - (drec.mean() + df.mean() - 2 * dr.mean() + lam * gp)))
        checks.append(abs(L.loss_generator(T(df), T(drec), T(a), T(b), lam).item()
                          - (-drec.mean() - df.mean() + lam * np.abs(a - b).mean())))
        checks.append(abs(L.loss_code_discriminator(T(df), T(dr), gp, lam).item()
                          - (df.mean() - dr.mean() + lam * gp)))
        checks.append(abs(L.loss_encoder(T(df)).item() + df.mean()))
    elapsed = time.perf_counter() - t0
    worst = max(checks)
    _record(1, worst < 1e-6 and elapsed < 1.0,
            f"max |error| {worst:.2e} (< 1e-6), runtime {elapsed:.2f}s (< 1s)", capsys)


def test_criterion_2_gradient_penalty(capsys):
    t0 = time.perf_counter()
    real, fake = torch.randn(4, 6, dtype=torch.float64), torch.randn(4, 6, dtype=torch.float64)
    w = torch.randn(6, dtype=torch.float64)
    w /= w.norm()
    unit = L.gradient_penalty(lambda x: x @ w, real, fake).item()
    const = L.gradient_penalty(lambda x: x.sum(1) * 0 + 1.0, real, fake).item()
    summed = L.gradient_penalty(lambda x: x.sum(1), real[:, :4], fake[:, :4]).item()

    torch.manual_seed(0)
    critic = nn.Sequential(nn.Linear(5, 4), nn.Tanh(), nn.Linear(4, 1)).double()
    f = lambda x: critic(x)[:, 0]
    r5, f5 = torch.randn(3, 5, dtype=torch.float64), torch.randn(3, 5, dtype=torch.float64)
    penalty = lambda: L.gradient_penalty(f, r5, f5, torch.Generator().manual_seed(7))
    critic.zero_grad()
    penalty().backward()
    params = list(critic.parameters())
    analytic = torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).flatten()
                          for p in params])
    numeric = []
    for p in params:
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + 1e-6
            up = penalty().item()
            flat[i] = old - 1e-6
            down = penalty().item()
            flat[i] = old
            numeric.append((up - down) / 2e-6)
    numeric = torch.tensor(numeric, dtype=torch.float64)
    rel = ((analytic - numeric).norm() / max(analytic.norm(), numeric.norm())).item()
    elapsed = time.perf_counter() - t0
    ok = abs(unit) < 1e-9 and abs(const - 1) < 1e-9 and abs(summed - 1) < 1e-9 and rel < 1e-3
    _record(2, ok and elapsed < 10,
            f"unit-norm {unit:.1e}, constant {const:.12f}, sum-of-4 {summed:.12f}, "
            f"FD rel err {rel:.2e} (< 1e-3), runtime {elapsed:.1f}s (< 10s)", capsys)


def test_criterion_3_network_gradients(capsys, double_precision):
    t0 = time.perf_counter()
    tc = TrainConfig(volume_size=16, latent_size=8, seed=3)
    errors = {}
    for name in AlphaGAN.NAMES:
        net = getattr(init_params(TINY_MODEL, tc), name).double()
        with torch.no_grad():
            for p in net.parameters():
                if p.dim() > 1:
                    p.mul_(10.0)
        g = torch.Generator().manual_seed(0)
        if name in ("generator", "code_discriminator"):
            x = torch.randn(3, 8, generator=g, dtype=torch.float64)
        else:
            x = torch.rand(3, 1, 16, 16, 16, generator=g, dtype=torch.float64) * 2 - 1
        errors[name] = fd_relative_error(net, x)
    elapsed = time.perf_counter() - t0
    worst = max(errors.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    _record(3, worst < 1e-4 and elapsed < 120,
            f"rel err {detail} (< 1e-4), runtime {elapsed:.0f}s (< 120s)", capsys)


def test_criterion_4_schedule(capsys, tiny_configs):
    tc, mc = tiny_configs
    ds = make_phantom_dataset(4, 16, seed=0)
    state = new_state(tc, mc)
    train_step(state, ds.volumes)
    counts = dict(state.update_counts)

    def changed_by(phase):
        st = new_state(tc, mc)
        st.model.train()
        before = {n: {k: v.clone() for k, v in net.state_dict().items()}
                  for n, net in st.model.nets().items()}
        x = torch.as_tensor(ds.volumes).unsqueeze(1)
        gen = torch_rng(0, 1, 0)
        {"eg": lambda: _eg_update(st, x, gen, True, LossBundle()),
         "d": lambda: _d_update(st, x, gen, LossBundle()),
         "c": lambda: _c_update(st, x, gen, LossBundle())}[phase]()
        return {n for n, net in st.model.nets().items()
                if any(not torch.equal(before[n][k], v) for k, v in net.state_dict().items())}

    isolation = {p: changed_by(p) for p in ("eg", "d", "c")}
    ok = (counts == {"eg": 2, "d": 1, "c": 1}
          and isolation == {"eg": {"generator", "encoder"}, "d": {"discriminator"},
                            "c": {"code_discriminator"}})
    _record(4, ok, f"counts {counts}; changed per phase "
            f"{ {k: sorted(v) for k, v in isolation.items()} }", capsys)


def test_criterion_5_metric_oracles(capsys):
    rng = np.random.default_rng(5)
    worst_mmd = 0.0
    for _ in range(100):
        g, r = rng.normal(size=(8, 64)), rng.normal(loc=0.3, size=(8, 64))
        ref = float(np.sum((g.mean(0) - r.mean(0)) ** 2))
        worst_mmd = max(worst_mmd, abs(mmd2_batchwise(g, r) - ref) / ref)
    self_mmd = abs(mmd2_batchwise(g, g))
    pairs = [(make_phantom(np.random.default_rng([11, 2 * i]), 32),
              make_phantom(np.random.default_rng([11, 2 * i + 1]), 32)) for i in range(10)]
    self_sim = max(abs(ms_ssim_pair(x, x) - 1.0) for x, _ in pairs)
    agree = max(abs(ms_ssim_pair(x, y) - ms_ssim_reference(x, y)) for x, y in pairs)
    ok = worst_mmd < 1e-9 and self_mmd < 1e-9 and self_sim < 1e-9 and agree < 1e-3
    _record(5, ok, f"MMD identity rel err {worst_mmd:.1e} (< 1e-9), mmd2(g,g) {self_mmd:.1e}, "
            f"MS-SSIM self {self_sim:.1e} (< 1e-9), reference gap {agree:.1e} (< 1e-3)", capsys)


# --- desk-scale training ---------------------------------------------------

@pytest.fixture(scope="module")
def desk_data():
    return make_phantom_dataset(200, 32, seed=0), make_phantom_dataset(200, 32, seed=1)


def _desk_run(mode, train_set, heldout, out_dir):
    tc = TrainConfig(volume_size=32, total_steps=DESK_STEPS, checkpoint_interval=DESK_STEPS,
                     mode=mode, seed=0)
    early = {}

    def at_step(state, report):
        if report.step == 100:
            early["mmd"] = mmd_score(generator_sampler(state, 100), heldout.volumes, 100, 8,
                                     np.random.default_rng(100))[0]

    t0 = time.perf_counter()
    state = train(tc, DESK_MODEL, train_set, out_dir, callback=at_step)
    elapsed = time.perf_counter() - t0
    with open(Path(out_dir) / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    mmd_final = mmd_score(generator_sampler(state, 100), heldout.volumes, 100, 8,
                          np.random.default_rng(100))[0]
    diversity = ms_ssim_diversity(generator_sampler(state, 7), pairs=1000)
    return {"rows": rows, "mmd_100": early["mmd"], "mmd_final": mmd_final,
            "diversity": diversity, "minutes": elapsed / 60}


@pytest.fixture(scope="module")
def desk_runs(desk_data, tmp_path_factory):
    runs = {}

    def get(mode):
        if mode not in runs:
            runs[mode] = _desk_run(mode, *desk_data, tmp_path_factory.mktemp(mode))
        return runs[mode]

    return get


@pytest.mark.slow
def test_criterion_6_desk_training(capsys, desk_runs):
    run = desk_runs("alpha-wgan-gp")
    rows = run["rows"]
    finite = len(rows) == DESK_STEPS and all(math.isfinite(float(r[c])) for r in rows
                                             for c in LOG_COLUMNS)
    recon = np.array([float(r["recon_l1"]) for r in rows])
    first, last = recon[:100].mean(), recon[-100:].mean()
    fixed = make_phantom(np.random.default_rng(0), 32)
    collapsed = ms_ssim_diversity(lambda n: np.repeat(fixed[None], n, 0), pairs=10)
    checks = {
        "finite": finite,
        "recon": last < 0.5 * first,
        "diversity": run["diversity"] < 0.98 and run["diversity"] < collapsed,
        "mmd": run["mmd_final"] < run["mmd_100"],
    }
    _record(6, all(checks.values()),
            f"losses finite {finite}; recon_l1 {first:.4f} -> {last:.4f} (ratio {last / first:.2f} "
            f"< 0.5); MS-SSIM diversity {run['diversity']:.4f} (< 0.98, fixed sampler "
            f"{collapsed:.3f}); MMD step100 {run['mmd_100']:.2f} -> step{DESK_STEPS} "
            f"{run['mmd_final']:.2f}; {run['minutes']:.0f} min", capsys)


@pytest.mark.slow
def test_criterion_7_mode_collapse_contrast(capsys, desk_runs):
    alpha = desk_runs("alpha-wgan-gp")
    wgan = desk_runs("wgan-gp-only")
    finite = all(math.isfinite(float(r[c])) for r in wgan["rows"] for c in LOG_COLUMNS)
    ordering = wgan["diversity"] >= alpha["diversity"]
    detail = (f"MS-SSIM wgan-gp-only {wgan['diversity']:.4f} vs alpha-wgan-gp "
              f"{alpha['diversity']:.4f}; MMD {wgan['mmd_final']:.2f} vs {alpha['mmd_final']:.2f}; "
              f"ordering expectation {'met' if ordering else 'NOT met (non-blocking)'}")
    _record(7, finite, detail, capsys)


def test_criterion_8_checkpoint_round_trip(capsys, tiny_configs, tmp_path):
    tc, mc = tiny_configs
    tc = dataclasses.replace(tc, total_steps=6)
    ds = make_phantom_dataset(8, 16, seed=0)
    full = train(tc, mc, ds)
    part = train(dataclasses.replace(tc, total_steps=3), mc, ds)
    save_checkpoint(part, tmp_path / "ck")
    resumed = load_checkpoint(tmp_path / "ck")
    resumed.train_config = tc
    resumed = train(tc, mc, ds, state=resumed)
    mismatched = [f"{n}.{k}" for n, net in full.model.nets().items()
                  for k, v in net.state_dict().items()
                  if not torch.equal(v, resumed.model.nets()[n].state_dict()[k])]
    _record(8, not mismatched and resumed.global_step == 6,
            f"6 steps vs 3 + save/load + 3: {len(mismatched)} differing tensors", capsys)


@pytest.mark.slow
def test_criterion_9_latent_sizes(capsys, desk_data):
    train_set, heldout = desk_data
    reports = {}
    for latent in (100, 1000, 2048):
        tc = TrainConfig(volume_size=32, latent_size=latent, total_steps=100, seed=0)
        state = train(tc, DESK_MODEL, train_set)
        mean, std = mmd_score(generator_sampler(state, 0), heldout.volumes, 20, 8,
                              np.random.default_rng(0))
        div = ms_ssim_diversity(generator_sampler(state, 1), pairs=50)
        reports[latent] = MetricReport(seed=0, n_trials=20, n_pairs=50, mmd_mean=mean,
                                       mmd_std=std, msssim_mean=div).fields()
    same_fields = len({tuple(r) for r in reports.values()}) == 1
    finite = all(math.isfinite(v) for r in reports.values() for v in r.values())
    detail = "; ".join(f"z{k}: MMD {r['mmd_mean']:.2f}, MS-SSIM {r['msssim_mean']:.3f}"
                       for k, r in reports.items())
    _record(9, same_fields and finite, detail, capsys)
