"""Benchmark the compiled edge kernels against the pure-NumPy fallback.

Times the three hot kernels on synthetic edge sets and a full GAT layer
forward+backward with each backend swapped in. Results of the two
backends are also cross-checked for agreement.

Usage: python benchmarks/bench_kernels.py [--edges 200000] [--nodes 20000]
       [--dim 64] [--repeats 5]
"""

import argparse
import time

import numpy as np

from spoilermoe import _kernels
from spoilermoe._kernels import numpy_ref

try:
    from spoilermoe._kernels import _fastk
except ImportError:
    _fastk = None

from spoilermoe.diffcore import ParamRegistry
from spoilermoe.diffcore import tensor as T
from spoilermoe.graph import GatLayer


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(n_edges, n_nodes, dim, repeats):
    rng = np.random.default_rng(0)
    idx = rng.integers(0, n_nodes, size=n_edges)
    src = rng.standard_normal((n_edges, dim)).astype(np.float32)
    scores = rng.standard_normal(n_edges).astype(np.float32)
    grad = rng.standard_normal(n_edges).astype(np.float32)

    idx64 = np.ascontiguousarray(idx, dtype=np.int64)
    rows = []
    backends = [("numpy", numpy_ref)] + ([("cython", _fastk)] if _fastk else [])

    cases = {
        "scatter_add_rows": lambda impl: impl.scatter_add_rows(
            np.zeros((n_nodes, dim), dtype=np.float32), idx64, src
        ),
        "segment_softmax": lambda impl: impl.segment_softmax(scores, idx64, n_nodes),
        "segment_softmax_grad": lambda impl: impl.segment_softmax_grad(
            numpy_ref.segment_softmax(scores, idx64, n_nodes), grad, idx64, n_nodes
        ),
    }
    for name, case in cases.items():
        times = {}
        for bname, impl in backends:
            times[bname] = timeit(lambda: case(impl), repeats)
        rows.append((name, times))

    # agreement check
    if _fastk:
        a = numpy_ref.segment_softmax(scores, idx64, n_nodes)
        b = _fastk.segment_softmax(scores, idx64, n_nodes)
        delta = float(np.abs(a - b).max())
        out_a = np.zeros((n_nodes, dim), dtype=np.float32)
        out_b = np.zeros((n_nodes, dim), dtype=np.float32)
        numpy_ref.scatter_add_rows(out_a, idx64, src)
        _fastk.scatter_add_rows(out_b, idx64, src)
        delta = max(delta, float(np.abs(out_a - out_b).max()))
        print(f"backend agreement: max|Δ| = {delta:.3e}")
    return rows


def bench_gat_layer(n_edges, n_nodes, dim, repeats):
    """Full GAT layer forward+backward with each backend swapped in."""
    rng = np.random.default_rng(1)
    src = rng.integers(0, n_nodes, size=n_edges).astype(np.int64)
    dst = rng.integers(0, n_nodes, size=n_edges).astype(np.int64)
    x = rng.standard_normal((n_nodes, dim)).astype(np.float32)
    reg = ParamRegistry(0)
    layer = GatLayer(reg, "gat", dim, dim)

    def run():
        out = layer(T.Tensor(x), src, dst, n_nodes)
        reg.zero_grads()
        T.backward(T.tsum(out))

    times = {}
    backends = [("numpy", numpy_ref)] + ([("cython", _fastk)] if _fastk else [])
    original = _kernels._impl
    try:
        for bname, impl in backends:
            _kernels._impl = impl  # reroute the wrapper for the benchmark
            times[bname] = timeit(run, repeats)
    finally:
        _kernels._impl = original
    return times


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--edges", type=int, default=200_000)
    ap.add_argument("--nodes", type=int, default=20_000)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    print(f"active backend: {_kernels.BACKEND}")
    print(f"{args.edges} edges, {args.nodes} nodes, dim {args.dim}\n")

    rows = bench_kernels(args.edges, args.nodes, args.dim, args.repeats)
    width = max(len(r[0]) for r in rows) + 2
    print(f"{'kernel':<{width}} {'numpy':>10} {'cython':>10} {'speedup':>9}")
    for name, times in rows:
        np_t = times.get("numpy", float('nan'))
        cy_t = times.get("cython")
        if cy_t:
            print(f"{name:<{width}} {np_t * 1e3:>8.2f}ms {cy_t * 1e3:>8.2f}ms "
                  f"{np_t / cy_t:>8.1f}x")
        else:
            print(f"{name:<{width}} {np_t * 1e3:>8.2f}ms {'n/a':>10} {'':>9}")

    gat = bench_gat_layer(args.edges, args.nodes, args.dim, args.repeats)
    if "cython" in gat:
        print(f"\nGAT layer fwd+bwd: numpy {gat['numpy'] * 1e3:.1f}ms, "
              f"cython {gat['cython'] * 1e3:.1f}ms "
              f"({gat['numpy'] / gat['cython']:.1f}x)")
    else:
        print(f"\nGAT layer fwd+bwd: numpy {gat['numpy'] * 1e3:.1f}ms")


if __name__ == "__main__":
    main()
