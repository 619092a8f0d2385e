"""Trainable residual vector quantizer over frame grids.

Stage n holds a codebook of K codewords; quantization greedily picks the
codeword nearest the running residual at each stage and subtracts it.
Reconstruction is the sum of the selected codewords.

Exactness contract: all values this module touches live on a dyadic grid
(multiples of ``GRID`` with magnitude <= ``BOUND``). On that grid every
subtraction and sum in the quantize/dequantize chain is exact in float64,
so ``dequantize(quantize(x).codes) + quantize(x).residual == x`` bit-wise,
and the float32 file format round-trips losslessly. ``train_codebooks``
snaps centroids to the grid; callers snap frames via ``snap_to_grid``.
"""

from dataclasses import dataclass

import numpy as np

from . import fileio, kernels
from .errors import ConfigError, InputError

# 2^-16 steps up to +/-2^7: differences of grid values need <= 24 mantissa
# bits, so they are exact in float32 and (with stage-sum headroom) float64.
GRID = 2.0 ** -16
BOUND = 128.0


def snap_to_grid(x):
    """Round values onto the codec's dyadic grid (exact float scaling)."""
    return np.clip(np.round(np.asarray(x, dtype=np.float64) / GRID) * GRID, -BOUND, BOUND)


@dataclass
class RvqConfig:
    n_q: int = 8
    K: int = 64
    D: int = 16
    frame_rate: int = 50

    def __post_init__(self):
        if self.n_q < 1:
            raise ConfigError("n_q must be >= 1")
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if self.D < 1:
            raise ConfigError("D must be >= 1")


@dataclass
class Codebook:
    """Codewords for one quantizer stage (1-based stage index)."""

    stage: int
    vectors: np.ndarray  # (K, D)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if not np.all(np.isfinite(self.vectors)):
            raise ConfigError(f"stage {self.stage}: non-finite codewords")
        uniq = np.unique(self.vectors, axis=0)
        if uniq.shape[0] != self.vectors.shape[0]:
            raise ConfigError(f"stage {self.stage}: duplicate codewords")


def books_array(books):
    """Stack a codebook list into the (n_q, K, D) array the kernels expect."""
    arr = np.stack([b.vectors for b in books], axis=0)
    return np.ascontiguousarray(arr, dtype=np.float64)


def _check_frames(frames, d):
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != d:
        raise ConfigError(
            f"frames have dimension {frames.shape[-1] if frames.ndim else '?'}, codewords have {d}"
        )
    if not np.all(np.isfinite(frames)):
        raise InputError("non-finite frame values")
    return frames


def quantize_frame(x, books):
    """Greedy per-stage quantization of one frame.

    Returns (indices (n_q,), residual (D,)). Ties in the per-stage argmin
    break toward the smallest codeword index.
    """
    arr = books_array(books)
    x = _check_frames(np.asarray(x, dtype=np.float64)[None, :], arr.shape[2])
    codes, resid = kernels.rvq_encode(x, arr)
    return codes[:, 0].copy(), resid[0].copy()


def dequantize_frame(indices, books):
    """Sum of the selected codewords, accumulated in stage order."""
    arr = books_array(books)
    indices = np.asarray(indices, dtype=np.int64)
    if np.any(indices < 0) or np.any(indices >= arr.shape[1]):
        raise InputError("codeword index out of range")
    out = np.zeros(arr.shape[2], dtype=np.float64)
    for n in range(arr.shape[0]):
        out += arr[n, indices[n]]
    return out


def encode_sequence(frames, books):
    """TokenGrid (n_q, T) for a frame grid; column t quantizes frame t."""
    arr = books_array(books)
    frames = _check_frames(frames, arr.shape[2])
    codes, _ = kernels.rvq_encode(frames, arr)
    return codes


def encode_sequence_with_residual(frames, books):
    arr = books_array(books)
    frames = _check_frames(frames, arr.shape[2])
    return kernels.rvq_encode(frames, arr)


def decode_sequence(tokens, books):
    """Frame grid reconstructed from a TokenGrid, stage-order accumulation."""
    arr = books_array(books)
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[0] != arr.shape[0]:
        raise InputError("token grid shape does not match codebooks")
    if np.any(tokens < 0) or np.any(tokens >= arr.shape[1]):
        raise InputError("codeword index out of range")
    out = np.zeros((tokens.shape[1], arr.shape[2]), dtype=np.float64)
    for n in range(arr.shape[0]):
        out += arr[n][tokens[n]]
    return out


def _maximin_init(points, k):
    """Gonzalez farthest-point seeding: deterministic, one seed per
    well-separated mode. First center is the point nearest the data mean."""
    mean = points.mean(axis=0, keepdims=True)
    first, _ = kernels.assign_nearest(mean, points)
    centers = [points[first[0]]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d2))
        centers.append(points[nxt])
        d2 = np.minimum(d2, np.sum((points - centers[-1]) ** 2, axis=1))
    return np.asarray(centers)


def _kmeans(points, k, iters):
    """Lloyd iterations from maximin seeding, with farthest-point reseeding
    of empty clusters. The fit is fully deterministic for fixed inputs.

    Centroids are snapped to the codec grid every update so the trained
    books keep the exactness contract.
    """
    centers = snap_to_grid(_maximin_init(points, k))
    prev = None
    for _ in range(iters):
        idx, d2 = kernels.assign_nearest(points, centers)
        if prev is not None and np.array_equal(idx, prev):
            break
        prev = idx
        counts = np.bincount(idx, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, idx, points)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not np.all(nonempty):
            # move each empty center onto the point farthest from its
            # current assignment, consuming points in distance order
            order = np.argsort(-d2, kind="stable")
            cursor = 0
            for j in np.flatnonzero(~nonempty):
                centers[j] = points[order[cursor]]
                cursor += 1
        centers = snap_to_grid(centers)
    return centers


def _dedupe(centers):
    """Bump exact duplicates by one grid step so codebooks stay injective."""
    seen = {}
    for i in range(centers.shape[0]):
        key = centers[i].tobytes()
        while key in seen:
            centers[i, 0] = min(centers[i, 0] + GRID, BOUND)
            key = centers[i].tobytes()
        seen[key] = i
    return centers


def train_codebooks(frames, cfg, seed=0, iters=50):
    """Stage-wise k-means: stage n fits the residuals of stages 1..n-1.

    Maximin seeding makes the fit deterministic for fixed data; ``seed`` is
    kept in the signature as part of the training contract but does not
    change the result.
    """
    frames = _check_frames(frames, cfg.D)
    if frames.shape[0] < cfg.K:
        raise InputError(
            f"need at least K={cfg.K} frames to train, got {frames.shape[0]}"
        )
    books = []
    resid = snap_to_grid(frames)
    for stage in range(1, cfg.n_q + 1):
        centers = _kmeans(resid, cfg.K, iters)
        centers = _dedupe(centers)
        book = Codebook(stage=stage, vectors=centers)
        books.append(book)
        idx, _ = kernels.assign_nearest(resid, centers)
        resid = resid - centers[idx]
    return books


def save_codebooks(path, books):
    fileio.write_codebooks(path, books_array(books))


def load_codebooks(path):
    arr = fileio.read_codebooks(path)
    return [Codebook(stage=n + 1, vectors=arr[n]) for n in range(arr.shape[0])]
