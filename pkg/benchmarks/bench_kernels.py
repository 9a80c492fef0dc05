"""Time the numba kernels against their numpy twins.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
Prints one line per kernel with the best-of-N wall time of each backend and
the largest difference between their outputs.
"""

import argparse
import time

import numpy as np

from shockstab import kernels


def _best(fn, args, repeat):
    fn(*args)  # warm-up (compilation for numba)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times), out


def _maxdiff(a, b):
    if isinstance(a, tuple):
        return max(_maxdiff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def cases(rng):
    n, pts = 4, 4001
    M0 = (rng.normal(size=(pts, n, n)) * 0.3).astype(complex)
    M1 = (rng.normal(size=(pts, n, n)) * 0.3).astype(complex)
    w0 = rng.normal(size=n) + 0j
    yield "linear_path", (M0, M1, 0.5 + 0.2j, 0.1 + 0j, w0, 0, pts - 1, 0.005)
    Q0 = np.linalg.qr(rng.normal(size=(n, 2)))[0] + 0j
    yield "drury_path", (M0, M1, 0.5 + 0.2j, 0.1 + 0j, np.ascontiguousarray(Q0), 0, pts - 1, 0.005)
    N, b = 20000, 2
    lower = rng.normal(size=(N, b, b)) * 0.1
    upper = rng.normal(size=(N, b, b)) * 0.1
    diag = 2 * np.eye(b) + rng.normal(size=(N, b, b)) * 0.1
    rhs = rng.normal(size=(N, b))
    yield "block_tridiag", (lower, diag, upper, rhs)
    K, C = 2000, 1200
    table = rng.normal(size=(K + 1, C))
    data = rng.normal(size=(K, C))
    yield "causal_conv", (table, data, K)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<15}{'numba [s]':>12}{'numpy [s]':>12}{'speedup':>10}{'max diff':>12}")
    for name, call_args in cases(rng):
        nb, npy = kernels.IMPLEMENTATIONS[name]
        t_nb, out_nb = _best(nb, call_args, args.repeat)
        t_np, out_np = _best(npy, call_args, args.repeat)
        diff = _maxdiff(out_nb, out_np)
        print(f"{name:<15}{t_nb:>12.2e}{t_np:>12.2e}{t_np / t_nb:>10.1f}{diff:>12.1e}")


if __name__ == "__main__":
    main()
