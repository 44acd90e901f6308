"""Compare the numba kernels with their pure-numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints the best wall-clock time of each variant and the speedup.  The first
numba call is made outside the timed region so compilation is excluded.
"""
import argparse
import sys
import timeit

import numpy as np

from mvmilstein import kernels


def _philox_args(n):
    pos = np.arange(n, dtype=np.uint64)
    z = np.zeros(n, dtype=np.uint64)
    return pos, z + np.uint64(3), z + np.uint64(1), z, np.uint64(7), np.uint64(0)


def _sums_args(n_paths, K):
    gen = np.random.default_rng(0)
    a = gen.standard_normal((n_paths, 2, K))
    return a, a.copy()


CASES = {
    "philox_normals (1e6 draws)": ("philox_normals", lambda: _philox_args(1_000_000)),
    "philox_uniforms (1e6 draws)": ("philox_uniforms", lambda: _philox_args(1_000_000)),
    "left_point_sums (2000 paths, K=512)": ("left_point_sums", lambda: _sums_args(2000, 512)),
}


def best_time(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        print("numba is not available (or disabled); only the numpy path can run")
        return 1
    print(f"{'kernel':40s} {'numpy [ms]':>11s} {'numba [ms]':>11s} {'speedup':>8s}")
    for label, (name, make) in CASES.items():
        inputs = make()
        f_np = getattr(kernels, name + "_numpy")
        f_nb = getattr(kernels, name + "_numba")
        ref, got = f_np(*inputs), f_nb(*inputs)   # also triggers compilation
        np.testing.assert_allclose(np.asarray(got), np.asarray(ref), rtol=1e-12, atol=1e-12)
        t_np = best_time(f_np, inputs, args.repeat)
        t_nb = best_time(f_nb, inputs, args.repeat)
        print(f"{label:40s} {t_np * 1e3:11.2f} {t_nb * 1e3:11.2f} {t_np / t_nb:7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
