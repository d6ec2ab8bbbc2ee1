"""Evaluation metrics: batch-wise linear-kernel MMD^2, volumetric MS-SSIM and
PCA projections of flattened volumes.

A *sampler* is any callable ``sampler(n) -> array (n, V, V, V)``; it owns its
own randomness. :func:`dataset_sampler` and :func:`generator_sampler` build
the two usual kinds.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels

Sampler = Callable[[int], np.ndarray]

SSIM_K1, SSIM_K2 = 0.01, 0.03
DATA_RANGE = 2.0
MS_WEIGHTS = {
    3: (0.2, 0.3, 0.5),
    5: (0.0448, 0.2856, 0.3001, 0.2363, 0.1333),
}
MIN_EDGE_PER_SCALE = 8


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# MMD

def _flat(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(len(x), -1)


def mmd2_batchwise(g, r) -> float:
    """(1/B^2) * sum(g g^T + r r^T - 2 g r^T) on flattened batches."""
    g, r = _flat(g), _flat(r)
    if g.shape != r.shape:
        raise MetricError(f"batch shape mismatch: {g.shape} vs {r.shape}")
    B = g.shape[0]
    total = (g @ g.T).sum() + (r @ r.T).sum() - 2.0 * (g @ r.T).sum()
    return float(total / B**2)


def mmd_score(sampler: Sampler, real, trials: int = 100, batch_size: int = 8,
              rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Mean and standard deviation of batch-wise MMD^2 over ``trials`` fresh
    batches of generated and uniformly drawn real volumes."""
    real = np.asarray(real)
    if len(real) < batch_size:
        raise MetricError(f"need at least {batch_size} real volumes, have {len(real)}")
    if trials < 1:
        raise MetricError("trials must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    values = np.empty(trials)
    for t in range(trials):
        idx = rng.choice(len(real), batch_size, replace=False)
        values[t] = mmd2_batchwise(sampler(batch_size), real[idx])
    return float(values.mean()), float(values.std())


# ---------------------------------------------------------------------------
# MS-SSIM

def gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - size // 2
    w = np.exp(-(coords**2) / (2 * sigma**2))
    return w / w.sum()


def _ssim_components(x: np.ndarray, y: np.ndarray, win: np.ndarray) -> tuple[float, float]:
    """Mean contrast-structure term and mean full SSIM at one scale."""
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    filt = _kernels.gaussian_filter_valid
    mu_x, mu_y = filt(x, win), filt(y, win)
    s_xx = filt(x * x, win) - mu_x * mu_x
    s_yy = filt(y * y, win) - mu_y * mu_y
    s_xy = filt(x * y, win) - mu_x * mu_y
    cs_map = (2 * s_xy + c2) / (s_xx + s_yy + c2)
    lum_map = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    return float(cs_map.mean()), float((lum_map * cs_map).mean())


def default_scales(edge: int) -> int:
    if edge >= 128:
        return 5
    return max(1, min(3, int(math.log2(edge // MIN_EDGE_PER_SCALE)) + 1)) if edge >= 8 else 1


def scale_weights(scales: int) -> tuple[float, ...]:
    if scales in MS_WEIGHTS:
        return MS_WEIGHTS[scales]
    w = np.asarray(MS_WEIGHTS[3][:scales] if scales < 3 else MS_WEIGHTS[5][:scales])
    return tuple(w / w.sum())


def ms_ssim_pair(x, y, scales: int | None = 3, weights: Sequence[float] | None = None,
                 win_size: int = 7, sigma: float = 1.5) -> float:
    """Volumetric MS-SSIM of two volumes with values in [-1, 1].

    Intensities are shifted to [0, 2]; each scale is 2x average-pooled from the
    previous. ``scales=None`` picks the largest count (up to 3, or 5 at
    V >= 128) the volume supports.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 3:
        raise MetricError(f"volumes must be 3D and equal-shaped, got {x.shape} and {y.shape}")
    edge = min(x.shape)
    if scales is None:
        scales = default_scales(edge)
    if edge < 2 ** (scales - 1) * MIN_EDGE_PER_SCALE or edge >> (scales - 1) < win_size:
        raise MetricError(f"volume edge {edge} too small for {scales} MS-SSIM scales")
    weights = scale_weights(scales) if weights is None else tuple(weights)
    if len(weights) != scales:
        raise MetricError("need one weight per scale")
    win = gaussian_window(win_size, sigma)
    x = np.ascontiguousarray(x + 1.0)
    y = np.ascontiguousarray(y + 1.0)
    value = 1.0
    for j in range(scales):
        cs, ssim = _ssim_components(x, y, win)
        term = ssim if j == scales - 1 else cs
        value *= max(term, 0.0) ** weights[j]
        if j < scales - 1:
            x, y = _kernels.avg_pool2(x), _kernels.avg_pool2(y)
    return float(value)


def ms_ssim_diversity(sampler: Sampler, pairs: int = 1000, rng: np.random.Generator | None = None,
                      chunk: int = 32, scales: int | None = None) -> float:
    """Mean MS-SSIM over ``pairs`` sample pairs; high values flag mode collapse.

    ``rng`` is accepted for interface symmetry; the sampler supplies all randomness.
    """
    if pairs < 1:
        raise MetricError("pairs must be >= 1")
    total, done = 0.0, 0
    while done < pairs:
        k = min(chunk, pairs - done)
        vols = np.asarray(sampler(2 * k))
        for i in range(k):
            total += ms_ssim_pair(vols[2 * i], vols[2 * i + 1], scales=scales)
        done += k
    return total / pairs


# ---------------------------------------------------------------------------
# samplers

def dataset_sampler(volumes, rng: np.random.Generator) -> Sampler:
    """Uniform draws from ``volumes``; without replacement within a call when possible."""
    volumes = np.asarray(volumes)

    def sample(n: int) -> np.ndarray:
        return volumes[rng.choice(len(volumes), n, replace=n > len(volumes))]

    return sample


def generator_sampler(state, seed: int) -> Sampler:
    import torch

    from .trainer import generate_samples

    gen = torch.Generator().manual_seed(seed)
    return lambda n: generate_samples(state, n, gen)


# ---------------------------------------------------------------------------
# PCA

@dataclass
class PCAResult:
    components: np.ndarray  # (k, N), orthonormal rows
    mean: np.ndarray  # (N,)
    explained_variance_ratio: np.ndarray  # (k,)
    real_coords: np.ndarray  # (n_real, k)
    generated_coords: np.ndarray  # (n_gen, k)

    def rows(self) -> list[tuple]:
        out = [("real", *map(float, c)) for c in self.real_coords]
        out += [("generated", *map(float, c)) for c in self.generated_coords]
        return out


def pca_project(real, generated, k: int = 2, fit_on: str = "real") -> PCAResult:
    """Fit top-``k`` principal axes (on real volumes by default) and project both sets."""
    R = _flat(real)
    Gm = _flat(generated) if len(generated) else np.zeros((0, R.shape[1]))
    if len(R) < 2:
        raise MetricError("need at least 2 real volumes for PCA")
    if k > len(R):
        raise MetricError(f"k={k} exceeds the number of real volumes ({len(R)})")
    if fit_on == "real":
        fit = R
    elif fit_on == "combined":
        fit = np.concatenate([R, Gm])
    else:
        raise MetricError(f"fit_on must be 'real' or 'combined', got {fit_on!r}")
    mean = fit.mean(axis=0)
    centered = fit - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    total = float((s**2).sum())
    if total <= 0 or s[0] <= 1e-12 * max(1.0, np.abs(fit).max()):
        raise MetricError("degenerate covariance: all fitted volumes are identical")
    comps = vt[:k].copy()
    # deterministic sign: largest-magnitude loading positive
    pivots = np.abs(comps).argmax(axis=1)
    comps *= np.sign(comps[np.arange(len(comps)), pivots])[:, None]
    var = s[:k] ** 2
    if len(var) < k:
        var = np.pad(var, (0, k - len(var)))
    return PCAResult(comps, mean, var / total, (R - mean) @ comps.T, (Gm - mean) @ comps.T)


def write_pca_csv(result: PCAResult, path: str | os.PathLike) -> None:
    k = result.components.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["population"] + [f"pc{i + 1}" for i in range(k)])
        w.writerows(result.rows())


# ---------------------------------------------------------------------------
# reports

@dataclass
class MetricReport:
    seed: int
    n_trials: int = 0
    n_pairs: int = 0
    batch_size: int = 8
    mmd_mean: float | None = None
    mmd_std: float | None = None
    msssim_mean: float | None = None

    def __post_init__(self):
        if self.mmd_mean is not None and self.n_trials <= 0:
            raise MetricError("n_trials must be > 0 when MMD is reported")
        if self.msssim_mean is not None and self.n_pairs <= 0:
            raise MetricError("n_pairs must be > 0 when MS-SSIM is reported")

    def fields(self) -> dict:
        out = {"seed": self.seed, "batch_size": self.batch_size}
        if self.mmd_mean is not None:
            out.update(n_trials=self.n_trials, mmd_mean=self.mmd_mean, mmd_std=self.mmd_std,
                       mmd_mean_x1e4=self.mmd_mean / 1e-4)
        if self.msssim_mean is not None:
            out.update(n_pairs=self.n_pairs, msssim_mean=self.msssim_mean)
        return out

    def write(self, directory: str | os.PathLike, stem: str = "metrics") -> None:
        os.makedirs(directory, exist_ok=True)
        fields = self.fields()
        with open(os.path.join(directory, f"{stem}.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            w.writerows(fields.items())
        with open(os.path.join(directory, f"{stem}.json"), "w") as fh:
            json.dump(fields, fh, indent=2)

    def to_dict(self) -> dict:
        return asdict(self)
