"""Time the numba and pure-numpy variants of each voxel kernel, plus one
MS-SSIM pair under each backend.

    python benchmarks/bench_kernels.py [--size 64] [--repeat 5]

The numba variants are warmed up (compiled) before timing.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from volgen import _kernels as K
from volgen.metrics import gaussian_window


def cases(size, rng):
    vol = rng.uniform(-1, 1, (size, size, size))
    padded = np.zeros((size + 20, size + 30, size + 10))
    padded[10:-10, 15:-15, 5:-5] = vol
    raw = rng.uniform(0, 1, (91, 109, 91))
    w = gaussian_window()
    return {
        "gaussian_filter_valid": ((vol, w), K.gaussian_filter_valid_numba, K.gaussian_filter_valid_numpy),
        "avg_pool2": ((vol,), K.avg_pool2_numba, K.avg_pool2_numpy),
        "resize_trilinear": ((raw, size), K.resize_trilinear_numba, K.resize_trilinear_numpy),
        "nonzero_bounds": ((padded,), K.nonzero_bounds_numba, K.nonzero_bounds_numpy),
    }


def best_of(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def msssim_time(backend, size, repeat):
    code = (
        "import timeit, numpy as np\n"
        "from volgen.data import make_phantom\n"
        "from volgen.metrics import ms_ssim_pair\n"
        f"x = make_phantom(np.random.default_rng(0), {size}); y = make_phantom(np.random.default_rng(1), {size})\n"
        "ms_ssim_pair(x, y)\n"
        f"print(min(timeit.repeat(lambda: ms_ssim_pair(x, y), number=1, repeat={repeat})))\n"
    )
    env = dict(os.environ, VOLGEN_NUMBA=backend)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, (fargs, fast, slow) in cases(args.size, rng).items():
        np.testing.assert_allclose(fast(*fargs), slow(*fargs), atol=1e-10)
        t_fast, t_slow = best_of(fast, fargs, args.repeat), best_of(slow, fargs, args.repeat)
        print(f"{name:<24}{t_fast * 1e3:>12.2f}{t_slow * 1e3:>12.2f}{t_slow / t_fast:>9.1f}x")
    t_fast, t_slow = msssim_time("1", args.size, args.repeat), msssim_time("0", args.size, args.repeat)
    print(f"{'ms_ssim_pair':<24}{t_fast * 1e3:>12.2f}{t_slow * 1e3:>12.2f}{t_slow / t_fast:>9.1f}x")


if __name__ == "__main__":
    main()
