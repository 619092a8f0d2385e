"""Binary file formats and the flat key=value config format.

Frame grids:  magic "UFRM", u16 version, u32 T, u32 D, T*D little-endian
              float32 values row-major.
Codebooks:    magic "URVQ", u16 version, u32 n_q, u32 K, u32 D, stage-major
              codewords in the same float32 layout.
Checkpoints:  magic "UALM", u16 version, config block, named float32 tensors.

All multi-byte integers are little-endian.
"""

import struct

import numpy as np

from .errors import FormatError

FRAMES_MAGIC = b"UFRM"
CODEBOOK_MAGIC = b"URVQ"
CHECKPOINT_MAGIC = b"UALM"
VERSION = 1


def _read_exact(f, n):
    data = f.read(n)
    if len(data) != n:
        raise FormatError("unexpected end of file")
    return data


def write_frames(path, frames):
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise FormatError("frame grid must be 2-D")
    t, d = frames.shape
    with open(path, "wb") as f:
        f.write(FRAMES_MAGIC)
        f.write(struct.pack("<HII", VERSION, t, d))
        f.write(frames.astype("<f4").tobytes(order="C"))


def read_frames(path):
    with open(path, "rb") as f:
        if _read_exact(f, 4) != FRAMES_MAGIC:
            raise FormatError(f"{path}: bad frames magic")
        version, t, d = struct.unpack("<HII", _read_exact(f, 10))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported frames version {version}")
        data = np.frombuffer(_read_exact(f, 4 * t * d), dtype="<f4")
    return data.reshape(t, d).astype(np.float64)


def write_codebooks(path, books):
    books = np.asarray(books, dtype=np.float64)
    if books.ndim != 3:
        raise FormatError("codebooks must be (n_q, K, D)")
    n_q, k, d = books.shape
    with open(path, "wb") as f:
        f.write(CODEBOOK_MAGIC)
        f.write(struct.pack("<HIII", VERSION, n_q, k, d))
        f.write(books.astype("<f4").tobytes(order="C"))


def read_codebooks(path):
    with open(path, "rb") as f:
        if _read_exact(f, 4) != CODEBOOK_MAGIC:
            raise FormatError(f"{path}: bad codebook magic")
        version, n_q, k, d = struct.unpack("<HIII", _read_exact(f, 14))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported codebook version {version}")
        data = np.frombuffer(_read_exact(f, 4 * n_q * k * d), dtype="<f4")
    return data.reshape(n_q, k, d).astype(np.float64)


def write_named_tensors(f, tensors):
    """Write a {name: ndarray} block: u32 count, then per-tensor records."""
    f.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        f.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            f.write(struct.pack("<I", dim))
        f.write(arr.astype("<f4").tobytes(order="C"))


def read_named_tensors(f):
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(f, 2))
        name = _read_exact(f, nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", _read_exact(f, 1))
        shape = tuple(
            struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(ndim)
        )
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(_read_exact(f, 4 * size), dtype="<f4")
        out[name] = data.reshape(shape).astype(np.float64)
    return out


def write_config(path, values):
    """Flat key=value text file; keys sorted for reproducible bytes."""
    with open(path, "w") as f:
        for key in sorted(values):
            f.write(f"{key}={values[key]}\n")


def read_config(path):
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values
