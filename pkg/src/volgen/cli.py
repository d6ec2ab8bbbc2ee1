"""``volgen`` command line: phantom, train, generate, evaluate, pca.

Exit codes: 0 success, 1 usage/config/data error, 2 runtime error
(divergence, corrupt checkpoint, I/O failure).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="volgen", description="3D auto-encoding WGAN-GP for volumetric MRI.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom", help="write synthetic phantom volumes as NIfTI")
    ph.add_argument("--num", type=_non_negative, required=True, help="number of volumes")
    ph.add_argument("--size", type=int, default=32, help="edge length V (>= 16)")
    ph.add_argument("--out", required=True, help="output directory")
    ph.add_argument("--seed", type=_non_negative, default=0, help="random seed")

    tr = sub.add_parser("train", help="train the model on a directory of NIfTI volumes")
    tr.add_argument("--config", required=True, help="YAML configuration file")
    tr.add_argument("--data", required=True, help="directory of NIfTI volumes")
    tr.add_argument("--out", required=True, help="output directory for checkpoints and log")
    tr.add_argument("--mode", choices=("alpha-wgan-gp", "alpha-gan-vanilla", "wgan-gp-only"),
                    help="override the configured training mode")
    tr.add_argument("--resume", help="checkpoint directory to continue from")

    ge = sub.add_parser("generate", help="sample volumes from a checkpoint")
    ge.add_argument("--checkpoint", required=True, help="checkpoint directory")
    ge.add_argument("--num", type=_non_negative, required=True, help="number of volumes")
    ge.add_argument("--seed", type=_non_negative, default=0, help="random seed")
    ge.add_argument("--out", required=True, help="output directory")

    ev = sub.add_parser("evaluate", help="MMD and MS-SSIM diversity of a checkpoint")
    ev.add_argument("--checkpoint", required=True, help="checkpoint directory")
    ev.add_argument("--data", required=True, help="directory of real NIfTI volumes")
    ev.add_argument("--metric", choices=("mmd", "msssim", "both"), default="both",
                    help="which metrics to compute")
    ev.add_argument("--trials", type=_positive, default=100, help="MMD trials")
    ev.add_argument("--batch", type=_positive, default=8, help="MMD batch size B")
    ev.add_argument("--pairs", type=_positive, default=1000, help="MS-SSIM sample pairs")
    ev.add_argument("--seed", type=_non_negative, default=0, help="random seed")
    ev.add_argument("--out", default=".", help="directory for metrics.csv / metrics.json")

    pc = sub.add_parser("pca", help="export PCA coordinates of real and generated volumes")
    pc.add_argument("--checkpoint", required=True, help="checkpoint directory")
    pc.add_argument("--data", required=True, help="directory of real NIfTI volumes")
    pc.add_argument("--num", type=_positive, default=512, help="generated (and max real) samples")
    pc.add_argument("--seed", type=_non_negative, default=0, help="random seed")
    pc.add_argument("--fit-on", choices=("real", "combined"), default="real",
                    help="population the principal axes are fitted on")
    pc.add_argument("--out", required=True, help="output CSV file")
    return p


# ---------------------------------------------------------------------------

def cmd_phantom(args) -> int:
    from .data import make_phantom, save_nifti

    if args.size < 16:
        raise UsageError("--size must be >= 16")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for i in range(args.num):
            vol = make_phantom(np.random.default_rng([args.seed, i]), args.size)
            save_nifti(vol, out / f"phantom_{i:05d}.nii.gz")
    except OSError as exc:
        print(f"error: cannot write to {out}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {args.num} phantoms to {out}")
    return EXIT_OK


def _load_data(directory, size):
    from .data import VolumeError, load_dataset

    try:
        return load_dataset(directory, size)
    except VolumeError as exc:
        raise UsageError(str(exc)) from None


def _load_state(path):
    from .checkpoint import load_checkpoint

    return load_checkpoint(path)


def cmd_train(args) -> int:
    from .config import ConfigError, load_config
    from .checkpoint import load_checkpoint
    from .losses import DivergenceError
    from .trainer import checkpoint_path, train

    try:
        tc, mc = load_config(args.config)
        if args.mode:
            tc = dataclasses.replace(tc, mode=args.mode)
    except ConfigError as exc:
        raise UsageError(f"config error: {exc}") from None
    dataset = _load_data(args.data, tc.volume_size)
    state = None
    if args.resume:
        state = load_checkpoint(args.resume)
        state.train_config = dataclasses.replace(state.train_config, total_steps=tc.total_steps)
        tc = state.train_config

    def progress(st, report):
        if report.step % 100 == 0:
            print(f"step {report.step:6d}  l_eg {report.l_eg:9.4f}  l_d {report.l_d:9.4f}  "
                  f"l_c {report.l_c:9.4f}  recon_l1 {report.recon_l1:.4f}", flush=True)

    try:
        state = train(tc, mc, dataset, args.out, state=state, callback=progress)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"final checkpoint: {checkpoint_path(args.out, state.global_step)}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .data import save_nifti
    from .trainer import generate_samples

    state = _load_state(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vols = generate_samples(state, args.num, args.seed)
    for i, vol in enumerate(vols):
        save_nifti(vol, out / f"sample_{i:05d}.nii.gz")
    print(f"wrote {len(vols)} samples to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import MetricReport, generator_sampler, mmd_score, ms_ssim_diversity

    state = _load_state(args.checkpoint)
    dataset = _load_data(args.data, state.train_config.volume_size)
    if len(dataset) < args.batch:
        raise UsageError(f"need at least {args.batch} real volumes, found {len(dataset)}")
    report = MetricReport(seed=args.seed, batch_size=args.batch)
    if args.metric in ("mmd", "both"):
        rng = np.random.default_rng([args.seed, 0])
        mean, std = mmd_score(generator_sampler(state, args.seed), dataset.volumes,
                              args.trials, args.batch, rng)
        report.mmd_mean, report.mmd_std, report.n_trials = mean, std, args.trials
    if args.metric in ("msssim", "both"):
        report.msssim_mean = ms_ssim_diversity(generator_sampler(state, args.seed + 1), args.pairs)
        report.n_pairs = args.pairs
    report.write(args.out)
    for key, value in report.fields().items():
        print(f"{key}: {value}")
    return EXIT_OK


def cmd_pca(args) -> int:
    from .metrics import pca_project, write_pca_csv
    from .trainer import generate_samples

    state = _load_state(args.checkpoint)
    dataset = _load_data(args.data, state.train_config.volume_size)
    rng = np.random.default_rng([args.seed, 0])
    n_real = min(args.num, len(dataset))
    real = dataset.volumes[np.sort(rng.choice(len(dataset), n_real, replace=False))]
    generated = generate_samples(state, args.num, args.seed)
    result = pca_project(real, generated, k=2, fit_on=args.fit_on)
    write_pca_csv(result, args.out)
    print(f"wrote {len(real) + len(generated)} rows to {args.out}")
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "pca": cmd_pca,
}


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .metrics import MetricError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
