"""Volume ingestion, preprocessing, augmentation and synthetic phantoms.

Volumes are plain float32 numpy arrays. ``RawVolume`` wraps an arbitrary
(D, H, W) grid straight from disk; a preprocessed volume is a cubic
(V, V, V) array with every voxel in [-1, 1]. The left-right axis is array
axis 0 by convention (no reorientation is performed).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import nibabel as nib
import numpy as np

from . import _kernels

LR_AXIS = 0
INTENSITY_JITTER = (0.9, 1.1)


class VolumeError(ValueError):
    pass


@dataclass
class RawVolume:
    voxels: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise VolumeError(f"expected a non-empty 3D grid, got shape {self.voxels.shape}")
        if not np.isfinite(self.voxels).all():
            raise VolumeError("non-finite voxel data")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


def check_volume(x: np.ndarray, size: int | None = None) -> np.ndarray:
    """Validate a preprocessed volume: cubic, finite, values in [-1, 1]."""
    x = np.asarray(x)
    if x.ndim != 3 or len(set(x.shape)) != 1:
        raise VolumeError(f"volume must be cubic, got shape {x.shape}")
    if size is not None and x.shape[0] != size:
        raise VolumeError(f"volume edge {x.shape[0]} != configured size {size}")
    if not np.isfinite(x).all() or x.min() < -1 or x.max() > 1:
        raise VolumeError("volume values must lie in [-1, 1]")
    return x


@dataclass
class Dataset:
    """Stack of same-shaped cubic volumes, shape (n, V, V, V)."""

    volumes: np.ndarray
    provenance: str = "phantom"

    def __post_init__(self):
        self.volumes = np.asarray(self.volumes, dtype=np.float32)
        if self.volumes.ndim != 4 or len(self.volumes) == 0:
            raise VolumeError("dataset must be a non-empty stack of 3D volumes")
        check_volume(self.volumes[0])
        if self.volumes.min() < -1 or self.volumes.max() > 1:
            raise VolumeError("dataset volumes must lie in [-1, 1]")
        if self.provenance not in ("phantom", "nifti"):
            raise VolumeError(f"unknown provenance {self.provenance!r}")

    def __len__(self) -> int:
        return len(self.volumes)

    def __getitem__(self, idx):
        return self.volumes[idx]

    @property
    def volume_size(self) -> int:
        return self.volumes.shape[1]


# ---------------------------------------------------------------------------
# NIfTI I/O

def load_nifti(path: str | os.PathLike) -> RawVolume:
    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj)
    except Exception as exc:
        raise VolumeError(f"cannot read NIfTI file {path}: {exc}") from None
    if data.ndim != 3:
        raise VolumeError(f"{path}: expected a single 3D image, got {data.ndim}D")
    return RawVolume(data.astype(np.float32), source_id=Path(path).name)


def save_nifti(voxels: np.ndarray, path: str | os.PathLike) -> None:
    img = nib.Nifti1Image(np.asarray(voxels, dtype=np.float32), affine=np.eye(4))
    img.header.set_xyzt_units("mm")
    nib.save(img, str(path))


# ---------------------------------------------------------------------------
# preprocessing

def trim_zero_planes(v: RawVolume) -> RawVolume:
    """Drop all-zero boundary planes along every axis; interior planes stay."""
    b = _kernels.nonzero_bounds(np.ascontiguousarray(v.voxels))
    if b[0] < 0:
        raise VolumeError("empty after trim: volume has no non-zero voxels")
    vox = v.voxels[b[0]:b[1], b[2]:b[3], b[4]:b[5]]
    return RawVolume(np.ascontiguousarray(vox), v.source_id)


def resize_trilinear(v: RawVolume, target: int) -> RawVolume:
    if target < 2:
        raise VolumeError("resize target must be >= 2")
    if v.shape == (target,) * 3:
        return RawVolume(v.voxels.copy(), v.source_id)
    out = _kernels.resize_trilinear(v.voxels.astype(np.float64), target)
    return RawVolume(out.astype(np.float32), v.source_id)


def normalize_to_unit_range(v: RawVolume) -> np.ndarray:
    """Per-volume min-max map onto [-1, 1]; endpoints are hit exactly."""
    x = v.voxels.astype(np.float64)
    if len(set(x.shape)) != 1:
        raise VolumeError(f"normalize expects a cubic volume, got {x.shape}")
    lo, hi = x.min(), x.max()
    if not hi > lo:
        raise VolumeError("degenerate intensity range")
    out = (2.0 * (x - lo) / (hi - lo) - 1.0).astype(np.float32)
    return np.clip(out, -1.0, 1.0)


def preprocess(v: RawVolume, size: int) -> np.ndarray:
    return normalize_to_unit_range(resize_trilinear(trim_zero_planes(v), size))


def load_dataset(directory: str | os.PathLike, size: int) -> Dataset:
    """Load every NIfTI file in ``directory`` (lexicographic order) and preprocess."""
    directory = Path(directory)
    if not directory.is_dir():
        raise VolumeError(f"data directory not found: {directory}")
    files = sorted(p for p in directory.iterdir()
                   if p.name.endswith(".nii") or p.name.endswith(".nii.gz"))
    if not files:
        raise VolumeError(f"no NIfTI files in {directory}")
    vols = [preprocess(load_nifti(p), size) for p in files]
    return Dataset(np.stack(vols), provenance="nifti")


# ---------------------------------------------------------------------------
# augmentation

def flip_lr(x: np.ndarray) -> np.ndarray:
    return np.flip(x, axis=LR_AXIS).copy()


def scale_intensity(x: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(x * np.float32(factor), -1.0, 1.0).astype(np.float32)


def augment(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random left-right mirror (p = 1/2) plus global intensity jitter."""
    flip = rng.random() < 0.5
    factor = rng.uniform(*INTENSITY_JITTER)
    if flip:
        x = flip_lr(x)
    return scale_intensity(x, factor)


# ---------------------------------------------------------------------------
# synthetic phantoms

def make_phantom(rng: np.random.Generator, size: int) -> np.ndarray:
    """Brain-like phantom: an ellipsoid with a brighter inner "ventricle" and
    smooth low-frequency intensity modulation. Background is exactly -1."""
    if size < 16:
        raise VolumeError("phantom size must be >= 16")
    grid = (np.arange(size) + 0.5) / size - 0.5
    z, y, x = np.meshgrid(grid, grid, grid, indexing="ij")
    axes = rng.uniform(0.3, 0.45, size=3)  # semi-axes as fractions of V
    r_brain = (z / axes[0]) ** 2 + (y / axes[1]) ** 2 + (x / axes[2]) ** 2
    brain = r_brain <= 1.0

    v_axes = axes * rng.uniform(0.2, 0.4, size=3)
    v_center = rng.uniform(-0.05, 0.05, size=3)
    r_vent = (((z - v_center[0]) / v_axes[0]) ** 2 + ((y - v_center[1]) / v_axes[1]) ** 2
              + ((x - v_center[2]) / v_axes[2]) ** 2)

    freqs = rng.uniform(1.0, 3.0, size=(3, 3))
    phases = rng.uniform(0, 2 * np.pi, size=3)
    amps = rng.uniform(0.05, 0.15, size=3)
    mod = sum(a * np.sin(2 * np.pi * (f[0] * z + f[1] * y + f[2] * x) + p)
              for a, f, p in zip(amps, freqs, phases))

    tissue = 0.5 + mod + 0.2 * (1.0 - np.clip(r_brain, 0, 1))  # brighter toward the core
    tissue = np.where(r_vent <= 1.0, tissue + 0.6, tissue)
    vol = np.where(brain, np.maximum(tissue, 0.05), 0.0)
    vol = 2.0 * vol / vol.max() - 1.0
    vol[~brain] = -1.0
    return vol.astype(np.float32)


def make_phantom_dataset(n: int, size: int, seed: int) -> Dataset:
    rngs = [np.random.default_rng([seed, i]) for i in range(n)]
    return Dataset(np.stack([make_phantom(r, size) for r in rngs]), provenance="phantom")


# ---------------------------------------------------------------------------
# batching

def batch_iterator(d: Dataset, batch_size: int, rng: np.random.Generator,
                   augment_flag: bool = False) -> Iterator[np.ndarray]:
    """One shuffled epoch of full batches, shape (B, V, V, V); remainder dropped."""
    if len(d) < batch_size:
        raise VolumeError(f"dataset has {len(d)} volumes, fewer than batch size {batch_size}")
    order = rng.permutation(len(d))
    for start in range(0, len(d) - batch_size + 1, batch_size):
        batch = d.volumes[order[start:start + batch_size]]
        if augment_flag:
            batch = np.stack([augment(x, rng) for x in batch])
        else:
            batch = batch.copy()
        yield batch
