"""Voxel-loop kernels used by preprocessing and the metrics.

Each kernel has a numba ``@njit`` version and a pure-numpy version with
identical semantics. The numba path is used when numba imports cleanly and
``VOLGEN_NUMBA`` is not set to ``0``; the choice is made once at import.
Both variants stay importable (``*_numba`` / ``*_numpy``) so tests and the
benchmark can compare them directly.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba as nb

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("VOLGEN_NUMBA", "1") != "0"


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return nb.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# separable "valid" correlation with a 1-D window along all three axes

@_njit
def gaussian_filter_valid_numba(vol, w):
    k = w.shape[0]
    a, b, c = vol.shape
    oa, ob, oc = a - k + 1, b - k + 1, c - k + 1
    t1 = np.zeros((oa, b, c))
    for i in range(oa):
        for t in range(k):
            wt = w[t]
            for j in range(b):
                for l in range(c):
                    t1[i, j, l] += wt * vol[i + t, j, l]
    t2 = np.zeros((oa, ob, c))
    for i in range(oa):
        for j in range(ob):
            for t in range(k):
                wt = w[t]
                for l in range(c):
                    t2[i, j, l] += wt * t1[i, j + t, l]
    out = np.zeros((oa, ob, oc))
    for i in range(oa):
        for j in range(ob):
            for l in range(oc):
                s = 0.0
                for t in range(k):
                    s += w[t] * t2[i, j, l + t]
                out[i, j, l] = s
    return out


def gaussian_filter_valid_numpy(vol, w):
    from numpy.lib.stride_tricks import sliding_window_view

    out = np.asarray(vol, dtype=np.float64)
    for axis in range(3):
        win = sliding_window_view(out, w.shape[0], axis=axis)
        out = win @ w
    return out


# ---------------------------------------------------------------------------
# 2x average pooling (trailing odd plane dropped)

@_njit
def avg_pool2_numba(vol):
    a, b, c = vol.shape[0] // 2, vol.shape[1] // 2, vol.shape[2] // 2
    out = np.empty((a, b, c))
    for i in range(a):
        for j in range(b):
            for l in range(c):
                s = 0.0
                for di in range(2):
                    for dj in range(2):
                        for dl in range(2):
                            s += vol[2 * i + di, 2 * j + dj, 2 * l + dl]
                out[i, j, l] = s * 0.125
    return out


def avg_pool2_numpy(vol):
    a, b, c = vol.shape[0] // 2, vol.shape[1] // 2, vol.shape[2] // 2
    v = np.asarray(vol, dtype=np.float64)[: 2 * a, : 2 * b, : 2 * c]
    return v.reshape(a, 2, b, 2, c, 2).mean(axis=(1, 3, 5))


# ---------------------------------------------------------------------------
# corner-aligned trilinear resampling

def _axis_weights(n_in, n_out):
    if n_in == 1 or n_out == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


@_njit
def _resize_numba(vol, lo0, hi0, f0, lo1, hi1, f1, lo2, hi2, f2):
    n0, n1, n2 = lo0.shape[0], lo1.shape[0], lo2.shape[0]
    out = np.empty((n0, n1, n2))
    for i in range(n0):
        a0, a1, fa = lo0[i], hi0[i], f0[i]
        for j in range(n1):
            b0, b1, fb = lo1[j], hi1[j], f1[j]
            for l in range(n2):
                c0, c1, fc = lo2[l], hi2[l], f2[l]
                v00 = vol[a0, b0, c0] * (1 - fc) + vol[a0, b0, c1] * fc
                v01 = vol[a0, b1, c0] * (1 - fc) + vol[a0, b1, c1] * fc
                v10 = vol[a1, b0, c0] * (1 - fc) + vol[a1, b0, c1] * fc
                v11 = vol[a1, b1, c0] * (1 - fc) + vol[a1, b1, c1] * fc
                v0 = v00 * (1 - fb) + v01 * fb
                v1 = v10 * (1 - fb) + v11 * fb
                out[i, j, l] = v0 * (1 - fa) + v1 * fa
    return out


def resize_trilinear_numba(vol, target):
    vol = np.ascontiguousarray(vol, dtype=np.float64)
    w = [_axis_weights(n, target) for n in vol.shape]
    return _resize_numba(vol, *w[0], *w[1], *w[2])


def resize_trilinear_numpy(vol, target):
    out = np.asarray(vol, dtype=np.float64)
    for axis in range(3):
        lo, hi, frac = _axis_weights(out.shape[axis], target)
        shape = [1, 1, 1]
        shape[axis] = target
        frac = frac.reshape(shape)
        out = np.take(out, lo, axis=axis) * (1 - frac) + np.take(out, hi, axis=axis) * frac
    return out


# ---------------------------------------------------------------------------
# bounding box of non-zero voxels: (start0, stop0, start1, stop1, start2, stop2)

@_njit
def nonzero_bounds_numba(vol):
    a, b, c = vol.shape
    lo = np.array([a, b, c])
    hi = np.array([-1, -1, -1])
    for i in range(a):
        for j in range(b):
            for l in range(c):
                if vol[i, j, l] != 0:
                    if i < lo[0]:
                        lo[0] = i
                    if i > hi[0]:
                        hi[0] = i
                    if j < lo[1]:
                        lo[1] = j
                    if j > hi[1]:
                        hi[1] = j
                    if l < lo[2]:
                        lo[2] = l
                    if l > hi[2]:
                        hi[2] = l
    if hi[0] < 0:
        return np.array([-1, -1, -1, -1, -1, -1])
    return np.array([lo[0], hi[0] + 1, lo[1], hi[1] + 1, lo[2], hi[2] + 1])


def nonzero_bounds_numpy(vol):
    nz = np.asarray(vol) != 0
    if not nz.any():
        return np.array([-1, -1, -1, -1, -1, -1])
    out = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(nz.any(axis=other))
        out += [idx[0], idx[-1] + 1]
    return np.array(out)


if USE_NUMBA:
    gaussian_filter_valid = gaussian_filter_valid_numba
    avg_pool2 = avg_pool2_numba
    resize_trilinear = resize_trilinear_numba
    nonzero_bounds = nonzero_bounds_numba
else:
    gaussian_filter_valid = gaussian_filter_valid_numpy
    avg_pool2 = avg_pool2_numpy
    resize_trilinear = resize_trilinear_numpy
    nonzero_bounds = nonzero_bounds_numpy
