"""Hot numeric kernels with numba-jitted and pure-numpy implementations.

The kernels here dominate runtime outside of BLAS matmuls:

* ``assign_nearest`` -- nearest-centroid search (k-means assignment and the
  synthetic-world frame classifier),
* ``rvq_encode`` -- stage-wise greedy residual quantization of a frame grid,
* ``gelu_fwd`` / ``gelu_bwd`` -- fused tanh-GELU activation passes (a single
  sweep instead of a chain of numpy temporaries).

Backend selection: env var ``SOUNDLM_NUMBA`` set to ``0`` forces the numpy
path, ``1`` requires numba (import error propagates), anything else (or
unset) uses numba when importable. Both paths break argmin ties toward the
smallest index. ``benchmarks/bench_kernels.py`` compares them.
"""

import math
import os

import numpy as np

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715

_flag = os.environ.get("SOUNDLM_NUMBA", "auto").strip().lower()
if _flag == "0":
    NUMBA_AVAILABLE = False
elif _flag == "1":
    import numba

    NUMBA_AVAILABLE = True
else:
    try:
        import numba

        NUMBA_AVAILABLE = True
    except ImportError:
        NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE


def assign_nearest_np(points, centers):
    """Nearest center per point: (indices, squared distances), numpy path."""
    # ||p-c||^2 expansion; recompute the winning distance exactly to avoid
    # the (rare) negative values the expansion can produce.
    p2 = np.einsum("nd,nd->n", points, points)
    c2 = np.einsum("kd,kd->k", centers, centers)
    d2 = p2[:, None] - 2.0 * (points @ centers.T) + c2[None, :]
    idx = np.argmin(d2, axis=1)
    diff = points - centers[idx]
    best = np.einsum("nd,nd->n", diff, diff)
    return idx.astype(np.int64), best


def gelu_fwd_np(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    return 0.5 * x * (1.0 + t), t


def gelu_bwd_np(x, t, dm):
    deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
    return dm * deriv


def rvq_encode_np(frames, books):
    """Greedy stage-wise RVQ of a (T, D) frame grid, numpy path.

    Returns (codes (n_q, T) int64, residuals (T, D)). The residual update
    uses one subtraction per stage so grid-aligned inputs stay exact.
    """
    n_q = books.shape[0]
    T = frames.shape[0]
    codes = np.empty((n_q, T), dtype=np.int64)
    resid = frames.copy()
    for n in range(n_q):
        idx, _ = assign_nearest_np(resid, books[n])
        codes[n] = idx
        resid -= books[n][idx]
    return codes, resid


if NUMBA_AVAILABLE:

    @numba.njit(cache=True)
    def _assign_nearest_nb(points, centers, out_idx, out_d2):
        n, d = points.shape
        k = centers.shape[0]
        for i in range(n):
            best = np.inf
            best_j = 0
            for j in range(k):
                acc = 0.0
                for m in range(d):
                    diff = points[i, m] - centers[j, m]
                    acc += diff * diff
                if acc < best:
                    best = acc
                    best_j = j
            out_idx[i] = best_j
            out_d2[i] = best

    @numba.njit(cache=True)
    def _rvq_encode_nb(frames, books, codes, resid):
        n_q, k, d = books.shape
        t = frames.shape[0]
        for i in range(t):
            for m in range(d):
                resid[i, m] = frames[i, m]
            for n in range(n_q):
                best = np.inf
                best_j = 0
                for j in range(k):
                    acc = 0.0
                    for m in range(d):
                        diff = resid[i, m] - books[n, j, m]
                        acc += diff * diff
                    if acc < best:
                        best = acc
                        best_j = j
                codes[n, i] = best_j
                for m in range(d):
                    resid[i, m] -= books[n, best_j, m]

    @numba.njit(cache=True)
    def _gelu_fwd_nb(x, y, t):
        for i in range(x.size):
            v = x[i]
            th = math.tanh(_GELU_C * (v + _GELU_A * v * v * v))
            t[i] = th
            y[i] = 0.5 * v * (1.0 + th)

    @numba.njit(cache=True)
    def _gelu_bwd_nb(x, t, dm, out):
        for i in range(x.size):
            v = x[i]
            th = t[i]
            deriv = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * _GELU_C * (
                1.0 + 3.0 * _GELU_A * v * v
            )
            out[i] = dm[i] * deriv

    def gelu_fwd_numba(x):
        flat = np.ascontiguousarray(x).reshape(-1)
        y = np.empty_like(flat)
        t = np.empty_like(flat)
        _gelu_fwd_nb(flat, y, t)
        return y.reshape(x.shape), t.reshape(x.shape)

    def gelu_bwd_numba(x, t, dm):
        flat = np.ascontiguousarray(x).reshape(-1)
        out = np.empty_like(flat)
        _gelu_bwd_nb(
            flat,
            np.ascontiguousarray(t).reshape(-1),
            np.ascontiguousarray(dm).reshape(-1),
            out,
        )
        return out.reshape(x.shape)

    def assign_nearest_numba(points, centers):
        points = np.ascontiguousarray(points, dtype=np.float64)
        centers = np.ascontiguousarray(centers, dtype=np.float64)
        idx = np.empty(points.shape[0], dtype=np.int64)
        d2 = np.empty(points.shape[0], dtype=np.float64)
        _assign_nearest_nb(points, centers, idx, d2)
        return idx, d2

    def rvq_encode_numba(frames, books):
        frames = np.ascontiguousarray(frames, dtype=np.float64)
        books = np.ascontiguousarray(books, dtype=np.float64)
        codes = np.empty((books.shape[0], frames.shape[0]), dtype=np.int64)
        resid = np.empty_like(frames)
        _rvq_encode_nb(frames, books, codes, resid)
        return codes, resid


def assign_nearest(points, centers):
    """Index and squared distance of the nearest center for each point."""
    if USE_NUMBA:
        return assign_nearest_numba(points, centers)
    return assign_nearest_np(points, centers)


def rvq_encode(frames, books):
    """Stage-greedy RVQ codes and final residuals for a frame grid."""
    if USE_NUMBA:
        return rvq_encode_numba(frames, books)
    return rvq_encode_np(frames, books)


def gelu_fwd(x):
    """tanh-GELU value plus the tanh cache for the backward pass."""
    if USE_NUMBA:
        return gelu_fwd_numba(x)
    return gelu_fwd_np(x)


def gelu_bwd(x, t, dm):
    """Upstream gradient ``dm`` times the GELU derivative, fused."""
    if USE_NUMBA:
        return gelu_bwd_numba(x, t, dm)
    return gelu_bwd_np(x, t, dm)
