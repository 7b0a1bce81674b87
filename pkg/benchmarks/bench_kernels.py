#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Runs the nearest-centroid assignment kernel (the k-means inner loop) and the
Hungarian solver at pipeline-representative sizes and prints a timing table.
The numpy path is what you get with SELFLABEL_BACKEND=numpy; numba rows only
appear when numba is importable.
"""

import time

import numpy as np

from selflabel import _kernels


def timeit(fn, *args, repeat=5):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def bench_assign(rows):
    rng = np.random.default_rng(0)
    cases = [
        ("assign 6000x16 K=200", rng.standard_normal((6000, 16)), rng.standard_normal((200, 16))),
        ("assign 6000x32 K=400", rng.standard_normal((6000, 32)), rng.standard_normal((400, 32))),
    ]
    for name, x, c in cases:
        t_np = timeit(_kernels.assign_points_numpy, x, c)
        if _kernels.HAVE_NUMBA:
            _kernels.assign_points_numba(x, c)  # compile outside the timer
            t_nb = timeit(_kernels.assign_points_numba, x, c)
            rows.append((name, t_np, t_nb))
        else:
            rows.append((name, t_np, None))


def bench_hungarian(rows):
    rng = np.random.default_rng(1)
    for k in (100, 300):
        cost = -rng.integers(0, 1000, size=(k, k)).astype(np.int64)
        t_np = timeit(_kernels.hungarian_numpy, cost, repeat=3)
        if _kernels.HAVE_NUMBA:
            _kernels.hungarian_numba(cost)
            t_nb = timeit(_kernels.hungarian_numba, cost, repeat=3)
            rows.append((f"hungarian K={k}", t_np, t_nb))
        else:
            rows.append((f"hungarian K={k}", t_np, None))


def main():
    print(f"active backend: {_kernels.active_backend()}")
    rows = []
    bench_assign(rows)
    bench_hungarian(rows)
    print(f"{'kernel':<24} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for name, t_np, t_nb in rows:
        if t_nb is None:
            print(f"{name:<24} {t_np * 1e3:>8.2f}ms {'-':>10} {'-':>8}")
        else:
            print(f"{name:<24} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
