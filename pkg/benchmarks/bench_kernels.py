"""Time the numba kernels against their pure-numpy fallbacks.

Usage: python benchmarks/bench_kernels.py [--repeats 5]

The package picks a backend once at import (GATEDMEM_KERNELS=numba|numpy|auto);
this script calls both implementations directly so one run covers both.
"""

import argparse
import time

import numpy as np

from gatedmem import kernels


def bench(fn, *args, repeats=5):
    fn(*args)  # warm-up (includes jit compile for the numba path)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)

    cases = []

    diffs = rng.integers(-1, 2, 800).astype(np.float64)
    idx = rng.integers(0, 800, size=(10000, 800))
    cases.append(("resample_means (B=10000, n=800)",
                  kernels.resample_means_numpy, (diffs, idx)))

    pool = rng.integers(-1, 2, 800).astype(np.float64)
    u = rng.random((10000, 800))
    sel = np.argpartition(u, 104, axis=1)[:, :105]
    cases.append(("group_stats (P=10000, n=800, n_a=105)",
                  kernels.group_stats_numpy, (pool, sel)))

    conf = rng.random(1_000_000)
    correct = (rng.random(1_000_000) < conf).astype(np.float64)
    cases.append(("binned_sums (n=1e6, 10 bins)",
                  kernels.binned_sums_numpy, (conf, correct, 10)))

    print(f"numba available: {kernels._HAVE_NUMBA}; package backend: "
          f"{'numba' if kernels.USING_NUMBA else 'numpy'}")
    print(f"{'kernel':45s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}")
    for name, np_fn, fn_args in cases:
        t_np = bench(np_fn, *fn_args, repeats=args.repeats)
        line = f"{name:45s} {t_np * 1e3:9.2f}ms"
        if kernels._HAVE_NUMBA:
            nb_fn = getattr(kernels, np_fn.__name__.replace("_numpy", "_numba"))
            t_nb = bench(nb_fn, *fn_args, repeats=args.repeats)
            line += f" {t_nb * 1e3:9.2f}ms {t_np / t_nb:7.2f}x"
        else:
            line += f" {'n/a':>10s} {'n/a':>8s}"
        print(line)


if __name__ == "__main__":
    main()
