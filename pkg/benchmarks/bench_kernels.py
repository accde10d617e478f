"""Time the compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``. Prints one
line per kernel with the best-of-N time for each backend, the speedup and
the largest absolute difference between the two results.
"""
import argparse
import timeit

import numpy as np

from dlcert import _kernels_py as py

try:
    from dlcert import _kernels as cy
except ImportError:  # extension not built
    cy = None


def _cases(rng):
    dims = [6, 5, 4, 5, 6]
    mats = [rng.standard_normal((dims[i + 1], dims[i])) for i in range(len(dims) - 1)]
    X = rng.standard_normal((dims[0], 60))
    Y = rng.standard_normal((dims[-1], 60))
    XXt, YXt = X @ X.T, Y @ X.T
    Gc = np.linalg.solve(XXt, YXt.T).T
    U0 = rng.standard_normal((200, dims[-1], 2))
    yy = float(np.sum(Y * Y))
    return {
        "chain_product": (lambda k: k.chain_product(mats), 2000),
        "chain_gradients": (lambda k: k.chain_gradients(mats, X, Y), 2000),
        "als_restarts (200 x 500)": (lambda k: k.als_restarts(XXt, YXt, Gc, yy, U0, 500), 1),
    }


def _max_diff(a, b) -> float:
    if isinstance(a, (tuple, list)):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    finite = np.isfinite(a) & np.isfinite(b)
    return float(np.max(np.abs(a[finite] - b[finite]), initial=0.0))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if cy is None:
        print("compiled extension not available; only the numpy backend can run")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'numpy':>12}{'compiled':>12}{'speedup':>9}{'max |diff|':>12}")
    for name, (fn, number) in _cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(py), number=number, repeat=args.repeat)) / number
        if cy is None:
            print(f"{name:<26}{t_py * 1e6:>10.1f}us")
            continue
        t_cy = min(timeit.repeat(lambda: fn(cy), number=number, repeat=args.repeat)) / number
        diff = _max_diff(fn(py), fn(cy))
        print(f"{name:<26}{t_py * 1e6:>10.1f}us{t_cy * 1e6:>10.1f}us{t_py / t_cy:>8.1f}x{diff:>12.1e}")


if __name__ == "__main__":
    main()
