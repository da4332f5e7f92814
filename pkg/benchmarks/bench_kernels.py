"""Compare the compiled kernels with the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat 3] [--sizes 200 800 3200]

Both backends receive identical inputs; the script checks that they agree
and prints the best-of-``repeat`` wall time and the speedup for each kernel.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from extrabounds._backend import get_kernels
from extrabounds.bounds import extreme_gradient_rows


def best_time(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        start = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - start)
    return best, out


def tree_case(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, (n, 2))
    t = X[:, 0].copy()
    y = np.abs(X[:, 0]) + 0.1 * rng.standard_normal(n)
    rows = rng.integers(0, n, n).astype(np.intp)
    # degree, min_leaf, max_depth, tol, mtry, seed, max_thresholds, rss_scale
    return (X, t, y, rows, 1, 5, -1, 0.0, 2, seed, 64, float(n))


def bounds_case(n, seed, m=400):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, 2))
    pilot = np.sin(X[:, 0]) + X[:, 1]
    G = np.column_stack([np.cos(X[:, 0]), np.ones(n)]) + 0.05 * rng.standard_normal((n, 2))
    T = rng.uniform(-3, 3, (m, 2))
    # the library passes hull vertices of the gradient rows, as here
    return (X, pilot, extreme_gradient_rows(G), T, np.arange(n, dtype=np.intp))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--sizes", type=int, nargs="+", default=[200, 800, 3200])
    args = parser.parse_args(argv)
    try:
        fast = get_kernels("compiled")
    except ImportError:
        raise SystemExit("compiled kernels are not built; reinstall with Cython available")
    slow = get_kernels("python")

    print(f"{'kernel':<18}{'n':>7}{'compiled s':>13}{'python s':>12}{'speedup':>10}")
    for n in args.sizes:
        cases = [("build_tree", "build_tree", tree_case(n, n)),
                 ("bounds_order_one", "bounds_order_one", bounds_case(n, n))]
        for label, name, inputs in cases:
            tc, oc = best_time(lambda: getattr(fast, name)(*inputs), args.repeat)
            tp, op = best_time(lambda: getattr(slow, name)(*inputs), args.repeat)
            for a, b in zip(oc, op):
                if not np.allclose(np.asarray(a), np.asarray(b), rtol=1e-12, atol=1e-12):
                    raise SystemExit(f"{label} backends disagree at n={n}")
            print(f"{label:<18}{n:>7}{tc:>13.4f}{tp:>12.4f}{tp / tc:>9.1f}x")


if __name__ == "__main__":
    main()
