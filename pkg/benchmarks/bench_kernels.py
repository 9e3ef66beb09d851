#!/usr/bin/env python3
"""Benchmark the jit kernels against their pure-numpy twins.

Run directly: python benchmarks/bench_kernels.py
The package-level switch (MEDI_NO_NUMBA=1) selects which path library code
uses; this script times both implementations side by side.
"""

import time

import numpy as np

from medi import kernels


def _time(fn, *args, repeats=5):
    fn(*args)  # warm-up (and jit compile)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_lloyd():
    print("Lloyd k-means iterations")
    print(f"{'n':>7} {'dim':>4} {'k':>3} {'numpy (ms)':>12} {'numba (ms)':>12} {'speedup':>8}")
    rng = np.random.default_rng(0)
    for n, dim, k in [(200, 8, 5), (1000, 16, 8), (5000, 32, 10), (20000, 32, 20)]:
        X = rng.normal(size=(n, dim))
        init = X[rng.choice(n, size=k, replace=False)].copy()
        t_np = _time(kernels._lloyd_np, X, init, 300)
        if kernels.USE_NUMBA:
            t_nb = _time(kernels._lloyd_nb, np.ascontiguousarray(X), np.ascontiguousarray(init), 300)
            print(f"{n:>7} {dim:>4} {k:>3} {1e3 * t_np:>12.2f} {1e3 * t_nb:>12.2f} {t_np / t_nb:>7.1f}x")
        else:
            print(f"{n:>7} {dim:>4} {k:>3} {1e3 * t_np:>12.2f} {'n/a':>12} {'':>8}")


def bench_pair_rows():
    print("\nTop-k index-set pair comparison")
    print(f"{'n':>7} {'k':>3} {'numpy (ms)':>12} {'numba (ms)':>12} {'speedup':>8}")
    rng = np.random.default_rng(1)
    for n, k in [(100, 10), (500, 10), (2000, 10), (5000, 20)]:
        sets = np.sort(rng.integers(0, 64, size=(n, k)), axis=1)
        t_np = _time(kernels._pair_rows_equal_np, sets)
        if kernels.USE_NUMBA:
            t_nb = _time(kernels._pair_rows_equal_nb, np.ascontiguousarray(sets))
            print(f"{n:>7} {k:>3} {1e3 * t_np:>12.2f} {1e3 * t_nb:>12.2f} {t_np / t_nb:>7.1f}x")
        else:
            print(f"{n:>7} {k:>3} {1e3 * t_np:>12.2f} {'n/a':>12} {'':>8}")


if __name__ == "__main__":
    print(f"active backend: {kernels.backend_name()}\n")
    bench_lloyd()
    bench_pair_rows()
