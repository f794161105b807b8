#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallbacks.

Runs each hot kernel on representative workloads with both
implementations and prints a timing table.  The dispatched backend in a
normal session follows the TIMEALLOC_NUMBA environment flag; this script
calls both implementations directly regardless of the flag.

Usage: python benchmarks/bench_kernels.py [--repeats N] [--fast]
"""

import argparse
import time

import numpy as np

from timealloc import kernels


def timeit(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def softmax_workload(n):
    rng = np.random.default_rng(0)
    return np.ascontiguousarray(rng.normal(scale=3.0, size=(n, 4)))


def jacobian_workload(n):
    rng = np.random.default_rng(1)
    Z = rng.normal(scale=1.0, size=(n, 4))
    P = kernels.softmax_rows_np(Z)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 10))])
    return np.ascontiguousarray(P), np.ascontiguousarray(X)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--fast", action="store_true", help="smaller workloads")
    args = parser.parse_args()

    if not kernels._HAVE_NUMBA:
        print("numba is unavailable (or disabled); showing numpy timings only\n")

    n_rows = 20_000 if args.fast else 200_000
    n_jac = 2_000 if args.fast else 8_000
    grid_n = 1_000 if args.fast else 2_000
    n_weights = 10 if args.fast else 50

    Z = softmax_workload(n_rows)
    P, X = jacobian_workload(n_jac)
    rng = np.random.default_rng(2)
    weight_sets = [np.exp(rng.normal(size=4)) for _ in range(n_weights)]

    cases = [
        (
            f"softmax_rows ({n_rows} rows)",
            lambda: kernels.softmax_rows_np(Z),
            (lambda: kernels._softmax_rows_nb(Z)) if kernels._HAVE_NUMBA else None,
        ),
        (
            f"share_jacobian ({n_jac} records)",
            lambda: kernels.share_jacobian_np(P, X),
            (lambda: kernels._share_jacobian_nb(P, X)) if kernels._HAVE_NUMBA else None,
        ),
        (
            f"simplex_grid_max ({n_weights} x N={grid_n})",
            lambda: [kernels.simplex_grid_max_np(w, grid_n, 1440.0) for w in weight_sets],
            (
                lambda: [kernels._grid_argmax_nb(w, grid_n, 1440.0) for w in weight_sets]
            )
            if kernels._HAVE_NUMBA
            else None,
        ),
    ]

    print(f"{'kernel':<38} {'numpy':>10} {'numba':>10} {'speedup':>9}")
    print("-" * 70)
    for name, np_fn, nb_fn in cases:
        t_np = timeit(np_fn, args.repeats)
        if nb_fn is None:
            print(f"{name:<38} {t_np * 1e3:>8.2f}ms {'-':>10} {'-':>9}")
            continue
        nb_fn()  # trigger compilation outside the timed region
        t_nb = timeit(nb_fn, args.repeats)
        print(
            f"{name:<38} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms "
            f"{t_np / t_nb:>8.1f}x"
        )


if __name__ == "__main__":
    main()
