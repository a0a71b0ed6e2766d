"""Raw ``.ten`` tensor fixtures.

Layout, all little-endian: an 8-byte magic (b"TEN0" padded with four NUL
bytes), u32 rank, rank × u32 dims, then the f32 values in row-major order.
"""

from __future__ import annotations

import struct
from math import prod
from pathlib import Path

import numpy as np

from .errors import DomainError

MAGIC = b"TEN0\x00\x00\x00\x00"


def dumps(arr) -> bytes:
    arr = np.asarray(arr, dtype="<f4")
    head = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return head + arr.tobytes()


def loads(raw: bytes) -> np.ndarray:
    if raw[:8] != MAGIC:
        raise DomainError(f"not a .ten fixture (magic {raw[:8]!r})")
    if len(raw) < 12:
        raise DomainError("truncated .ten fixture")
    (rank,) = struct.unpack_from("<I", raw, 8)
    end = 12 + 4 * rank
    if len(raw) < end:
        raise DomainError("truncated .ten fixture header")
    dims = struct.unpack_from(f"<{rank}I", raw, 12)
    n = prod(dims)
    if len(raw) != end + 4 * n:
        raise DomainError(f".ten fixture payload is {len(raw) - end} bytes, expected {4 * n}")
    return np.frombuffer(raw, dtype="<f4", count=n, offset=end).reshape(dims).astype(np.float32)


def save(path, arr) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
