"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--nnz 20000,200000] [--rank 5] [--repeats 5]

Each kernel runs on both backends with identical inputs; results are checked
for agreement before timings are reported (best of ``--repeats``).
"""

import argparse
import time

import numpy as np

from gocpt import _fallback, kernels

try:
    from gocpt import _kernels
except ImportError:  # extension not built
    _kernels = None


def _best(fn, repeats):
    best = float("inf")
    out = None
    for _ in range(repeats):
        start = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - start)
    return best, out


def _case(shape, nnz, rank, seed):
    rng = np.random.default_rng(seed)
    cells = int(np.prod(shape))
    keys = np.sort(rng.choice(cells, size=min(nnz, cells), replace=False))
    idx = np.stack(np.unravel_index(keys, shape), axis=1).astype(np.int64)
    vals = rng.random(len(keys))
    factors = [rng.random((d, rank)) for d in shape]
    return idx, vals, factors


def bench(shape, nnz, rank, repeats, seed=0):
    idx, vals, factors = _case(shape, nnz, rank, seed)
    grams = rng_grams(shape[0], rank, seed)
    rhs = np.random.default_rng(seed).random((shape[0], rank))
    jobs = {
        "row_systems": lambda impl: kernels.row_systems(
            idx, vals, factors, 0, shape[0], impl=impl)[:2],
        "sparse_mttkrp": lambda impl: kernels.sparse_mttkrp(
            idx, vals, factors, 0, shape[0], impl=impl),
        "kruskal_at_many": lambda impl: kernels.kruskal_at_many(idx, factors, impl=impl),
        "cholesky_solve_many": lambda impl: kernels.cholesky_solve_many(
            grams, rhs, impl=impl)[0],
    }
    rows = []
    for name, job in jobs.items():
        t_py, ref = _best(lambda: job(_fallback), repeats)
        if _kernels is None:
            rows.append((name, t_py, None, None))
            continue
        t_cy, got = _best(lambda: job(_kernels), repeats)
        for a, b in zip(np.atleast_1d(ref) if not isinstance(ref, tuple) else ref,
                        np.atleast_1d(got) if not isinstance(got, tuple) else got):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
        rows.append((name, t_py, t_cy, t_py / t_cy))
    return rows


def rng_grams(n, rank, seed):
    rng = np.random.default_rng(seed + 1)
    a = rng.random((n, rank + 3, rank))
    return np.einsum("nij,nik->njk", a, a) + 1e-3 * np.eye(rank)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--shape", default="200,200,200")
    ap.add_argument("--nnz", default="20000,200000")
    ap.add_argument("--rank", type=int, default=5)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    shape = tuple(int(v) for v in args.shape.split(","))
    print(f"default backend: {kernels.BACKEND}")
    print(f"{'kernel':22s} {'nnz':>8s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for nnz in (int(v) for v in args.nnz.split(",")):
        for name, t_py, t_cy, ratio in bench(shape, nnz, args.rank, args.repeats):
            cy = "n/a" if t_cy is None else f"{t_cy * 1e3:10.2f}"
            sp = "" if ratio is None else f"{ratio:7.1f}x"
            print(f"{name:22s} {nnz:8d} {t_py * 1e3:10.2f} {cy:>10s} {sp:>8s}")


if __name__ == "__main__":
    main()
