"""Dense rank-5 volumes and the GSV1 file format.

Volumes are plain C-contiguous float64 numpy arrays of shape (N, D, H, W, C):
batch-major, channel fastest. Nothing in the package uses strided views or
per-tensor layout flags, so the flat buffer order is always
``c + C*(z + W*(y + H*(x + D*n)))``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import BoundsError, FormatError, ShapeError

GSV1_MAGIC = b"GSVOL1\0\0"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class Shape5(NamedTuple):
    N: int
    D: int
    H: int
    W: int
    C: int

    @classmethod
    def of(cls, dims) -> "Shape5":
        dims = tuple(int(v) for v in dims)
        if len(dims) != 5:
            raise ShapeError(f"expected 5 dims (N,D,H,W,C), got {len(dims)}")
        if any(v < 1 for v in dims):
            raise ShapeError(f"all dims must be >= 1, got {dims}")
        return cls(*dims)

    @property
    def size(self) -> int:
        return self.N * self.D * self.H * self.W * self.C

    @property
    def spatial(self) -> tuple[int, int, int]:
        return (self.D, self.H, self.W)


def as_volume(a, copy: bool = False) -> np.ndarray:
    """Coerce to a contiguous float64 rank-5 array, validating the shape."""
    if copy:
        arr = np.array(a, dtype=np.float64, order="C")
    else:
        arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 5:
        raise ShapeError(f"volume must be rank 5 (N,D,H,W,C), got rank {arr.ndim}")
    Shape5.of(arr.shape)
    return arr


def zeros(dims) -> np.ndarray:
    return np.zeros(Shape5.of(dims), dtype=np.float64)


def linear_index(coords, dims) -> int:
    n, x, y, z, c = (int(v) for v in coords)
    N, D, H, W, C = Shape5.of(dims)
    for name, v, lim in zip("nxyzc", (n, x, y, z, c), (N, D, H, W, C)):
        if not 0 <= v < lim:
            raise BoundsError(f"coordinate {name}={v} outside [0, {lim})")
    return c + C * (z + W * (y + H * (x + D * n)))


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    return a + b


def scale(a, factor: float) -> np.ndarray:
    return np.asarray(a, dtype=np.float64) * float(factor)


def relu(a) -> np.ndarray:
    return np.maximum(np.asarray(a, dtype=np.float64), 0.0)


def relu_grad_mask(a) -> np.ndarray:
    """1.0 where the ReLU input was strictly positive, else 0.0."""
    return (np.asarray(a) > 0).astype(np.float64)


def total(a) -> float:
    return float(np.sum(a, dtype=np.float64))


def mean(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(a.sum() / a.size)


def channel_mean_var(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-(sample, channel) mean and biased variance over the spatial axes.

    Returns two arrays of shape (N, C).
    """
    a = as_volume(a)
    m = a.mean(axis=(1, 2, 3))
    v = ((a - m[:, None, None, None, :]) ** 2).mean(axis=(1, 2, 3))
    return m, v


# GSV1 ------------------------------------------------------------------------


def encode_volume(vol, dtype: str = "f64") -> bytes:
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported dtype {dtype!r}; expected f32 or f64")
    vol = as_volume(vol)
    header = json.dumps({"dims": list(vol.shape), "dtype": dtype}).encode()
    body = vol.astype(_DTYPES[dtype], copy=False).tobytes(order="C")
    return GSV1_MAGIC + struct.pack("<I", len(header)) + header + body


def decode_volume(buf: bytes) -> np.ndarray:
    if buf[:8] != GSV1_MAGIC:
        raise FormatError("bad magic: not a GSV1 volume")
    if len(buf) < 12:
        raise FormatError("truncated GSV1 header")
    (hlen,) = struct.unpack("<I", buf[8:12])
    try:
        header = json.loads(buf[12 : 12 + hlen])
        dims = Shape5.of(header["dims"])
        dt = _DTYPES[header["dtype"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad GSV1 header: {exc}") from exc
    body = buf[12 + hlen :]
    if len(body) != dims.size * dt.itemsize:
        raise FormatError(f"GSV1 body has {len(body)} bytes, header implies {dims.size * dt.itemsize}")
    return np.frombuffer(body, dtype=dt).astype(np.float64).reshape(dims)


def save_volume(path, vol, dtype: str = "f64") -> None:
    Path(path).write_bytes(encode_volume(vol, dtype))


def load_volume(path) -> np.ndarray:
    return decode_volume(Path(path).read_bytes())
