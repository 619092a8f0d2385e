#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Covers nearest-centroid assignment, stage-greedy RVQ encoding, and the
fused GELU passes. Results print as a table and optionally land in JSON.

Usage:
    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --points 200000 --repeats 5
    python3 benchmarks/bench_kernels.py --output results.json
"""

import argparse
import json
import time

import numpy as np

from soundlm import kernels


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def check_close(a, b):
    idx_a, d_a = a
    idx_b, d_b = b
    return bool(np.array_equal(idx_a, idx_b) and np.allclose(d_a, d_b, rtol=1e-9))


def bench_assign(n_points, k, d, repeats, rng):
    points = rng.normal(size=(n_points, d))
    centers = rng.normal(size=(k, d))
    if kernels.NUMBA_AVAILABLE:
        kernels.assign_nearest_numba(points[:8], centers)  # jit warmup
        t_nb = timeit(lambda: kernels.assign_nearest_numba(points, centers), repeats)
        agree = check_close(
            kernels.assign_nearest_numba(points, centers),
            kernels.assign_nearest_np(points, centers),
        )
    else:
        t_nb, agree = float("inf"), True
    t_np = timeit(lambda: kernels.assign_nearest_np(points, centers), repeats)
    return {"kernel": "assign_nearest", "shape": f"{n_points}x{d} vs {k}",
            "numba_s": t_nb, "numpy_s": t_np,
            "speedup": t_np / t_nb if t_nb > 0 else 0.0, "agree": agree}


def bench_rvq(t, n_q, k, d, repeats, rng):
    frames = rng.normal(size=(t, d))
    books = rng.normal(size=(n_q, k, d))
    if kernels.NUMBA_AVAILABLE:
        kernels.rvq_encode_numba(frames[:8], books)
        t_nb = timeit(lambda: kernels.rvq_encode_numba(frames, books), repeats)
        c_nb, _ = kernels.rvq_encode_numba(frames, books)
        c_np, _ = kernels.rvq_encode_np(frames, books)
        agree = bool(np.array_equal(c_nb, c_np))
    else:
        t_nb, agree = float("inf"), True
    t_np = timeit(lambda: kernels.rvq_encode_np(frames, books), repeats)
    return {"kernel": "rvq_encode", "shape": f"{t}x{d}, {n_q} stages x {k}",
            "numba_s": t_nb, "numpy_s": t_np,
            "speedup": t_np / t_nb if t_nb > 0 else 0.0, "agree": agree}


def bench_gelu(n, repeats, rng):
    x = rng.normal(size=n).astype(np.float32)
    dm = rng.normal(size=n).astype(np.float32)
    if kernels.NUMBA_AVAILABLE:
        kernels.gelu_fwd_numba(x[:16])
        t_nb = timeit(lambda: kernels.gelu_fwd_numba(x), repeats)
        y_nb, tc = kernels.gelu_fwd_numba(x)
        y_np, _ = kernels.gelu_fwd_np(x)
        agree = bool(np.allclose(y_nb, y_np, atol=1e-6))
        kernels.gelu_bwd_numba(x, tc, dm)
    else:
        t_nb, agree = float("inf"), True
    t_np = timeit(lambda: kernels.gelu_fwd_np(x), repeats)
    return {"kernel": "gelu_fwd", "shape": f"{n} elements",
            "numba_s": t_nb, "numpy_s": t_np,
            "speedup": t_np / t_nb if t_nb > 0 else 0.0, "agree": agree}


def main():
    parser = argparse.ArgumentParser(description="kernel benchmarks")
    parser.add_argument("--points", type=int, default=100_000)
    parser.add_argument("--centers", type=int, default=64)
    parser.add_argument("--dim", type=int, default=16)
    parser.add_argument("--frames", type=int, default=20_000)
    parser.add_argument("--stages", type=int, default=8)
    parser.add_argument("--gelu-size", type=int, default=2_000_000)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--output", type=str, default=None)
    args = parser.parse_args()

    print(f"numba available: {kernels.NUMBA_AVAILABLE} (SOUNDLM_NUMBA to override)")
    rng = np.random.default_rng(0)
    rows = [
        bench_assign(args.points, args.centers, args.dim, args.repeats, rng),
        bench_rvq(args.frames, args.stages, args.centers, args.dim, args.repeats, rng),
        bench_gelu(args.gelu_size, args.repeats, rng),
    ]

    print(f"\n{'kernel':<16} {'shape':<28} {'numba (s)':>10} {'numpy (s)':>10} "
          f"{'speedup':>8} {'agree':>6}")
    print("-" * 84)
    for r in rows:
        print(f"{r['kernel']:<16} {r['shape']:<28} {r['numba_s']:>10.4f} "
              f"{r['numpy_s']:>10.4f} {r['speedup']:>7.1f}x {str(r['agree']):>6}")

    if args.output:
        with open(args.output, "w") as f:
            json.dump({"numba_available": kernels.NUMBA_AVAILABLE, "results": rows},
                      f, indent=2)
        print(f"\nresults saved to {args.output}")


if __name__ == "__main__":
    main()
