"""Time the compiled Jacobi kernel against the pure-Python fallback.

Usage: python3 benchmarks/bench_svd.py [--sizes 8 16 32] [--repeat 5]
"""

import argparse
import time

import numpy as np

from consolidate import _jacobi_py, tensor


def best_time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    p = argparse.ArgumentParser()
    p.add_argument("--sizes", type=int, nargs="+", default=[8, 16, 32, 64])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    try:
        from consolidate import _jacobi
    except ImportError:
        _jacobi = None
        print("compiled kernel not built; timing the fallback only")

    g = np.random.default_rng(0)
    print(f"{'size':>6} {'python ms':>11} {'compiled ms':>12} {'speedup':>8} {'max |diff|':>11}")
    for n in args.sizes:
        a = g.standard_normal((n, n))
        t_py = best_time(lambda: tensor.svd(a, kernel=_jacobi_py), args.repeat)
        row = f"{n:>6} {1e3 * t_py:>11.2f}"
        if _jacobi is not None:
            t_c = best_time(lambda: tensor.svd(a, kernel=_jacobi), args.repeat)
            diff = np.max(np.abs(tensor.svd(a, kernel=_jacobi).s - tensor.svd(a, kernel=_jacobi_py).s))
            row += f" {1e3 * t_c:>12.3f} {t_py / t_c:>7.0f}x {diff:>11.1e}"
        print(row)


if __name__ == "__main__":
    main()
