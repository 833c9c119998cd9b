"""Dense tensor helpers, seeded random streams and the CMLT tensor file format.

Tensors are plain ``numpy.ndarray`` values in float64, C (row-major) order.
Element ``(i, j)`` of an ``m x n`` tensor lives at flat offset ``i * n + j``.
Values are narrowed to float32 only when written to disk.
"""

from __future__ import annotations

import math
import struct
import zlib
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (
    BadMagicError,
    ShapeError,
    SizeOverflowError,
    TrailingDataError,
    TruncatedError,
    UnsupportedVersionError,
)

Tensor = np.ndarray

TENSOR_MAGIC = b"CMLT"
TENSOR_VERSION = 1
MAX_RANK = 16
# 2**40 elements (~4 TiB of float32) is far beyond anything this package writes.
MAX_ELEMENTS = 1 << 40


def as_tensor(x) -> Tensor:
    """Return ``x`` as a contiguous float64 array (no copy when already one)."""
    return np.ascontiguousarray(x, dtype=np.float64)


def flat_offset(index: tuple[int, ...], shape: tuple[int, ...]) -> int:
    offset = 0
    for i, n in zip(index, shape):
        if not 0 <= i < n:
            raise IndexError(f"index {index} out of bounds for shape {shape}")
        offset = offset * n + i
    return offset


def elementwise_map(t: Tensor, f: Callable[[float], float]) -> Tensor:
    t = as_tensor(t)
    out = np.fromiter((f(float(v)) for v in t.ravel()), dtype=np.float64, count=t.size)
    return out.reshape(t.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


class Rng:
    """Seeded generator factory with independent named sub-streams.

    Every stream is a PCG64 generator keyed by ``(seed, crc32(name))`` through
    ``numpy.random.SeedSequence``; asking for a new stream name never shifts
    the draws of another.
    """

    ALGORITHM = "PCG64"

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)

    def stream(self, name: str) -> np.random.Generator:
        key = zlib.crc32(name.encode("utf-8"))
        seq = np.random.SeedSequence(self.seed, spawn_key=(key,))
        return np.random.Generator(np.random.PCG64(seq))

    def __repr__(self):
        return f"Rng(seed={self.seed}, algorithm={self.ALGORITHM})"


class BinaryReader:
    """Cursor over an in-memory byte buffer that raises on short reads."""

    def __init__(self, data: bytes, what: str = "file"):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedError(
                f"truncated {self.what}: need {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def magic(self, expected: bytes) -> None:
        got = self.data[:len(expected)]
        if got != expected:
            raise BadMagicError(f"bad magic: expected {expected!r}, got {got!r}")
        self.pos = len(expected)

    def version(self, expected: int) -> None:
        (version,) = self.unpack("<I")
        if version != expected:
            raise UnsupportedVersionError(
                f"unsupported {self.what} version {version} (expected {expected})"
            )

    def shape(self) -> tuple[int, ...]:
        (rank,) = self.unpack("<I")
        if rank > MAX_RANK:
            raise SizeOverflowError(f"rank overflow: {rank} > {MAX_RANK}")
        dims = self.unpack(f"<{rank}Q") if rank else ()
        count = 1
        for d in dims:
            count *= d
            if count > MAX_ELEMENTS:
                raise SizeOverflowError(f"size overflow: dims {dims}")
        return tuple(int(d) for d in dims)

    def float32s(self, shape: tuple[int, ...]) -> np.ndarray:
        count = math.prod(shape)
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").reshape(shape)

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise TrailingDataError(
                f"{len(self.data) - self.pos} trailing bytes after {self.what}"
            )


def pack_shape(shape: tuple[int, ...]) -> bytes:
    return struct.pack(f"<I{len(shape)}Q", len(shape), *shape)


def pack_float32(t) -> bytes:
    return np.ascontiguousarray(t, dtype="<f4").tobytes()


def encode_tensor(t) -> bytes:
    arr = np.asarray(t)
    return TENSOR_MAGIC + struct.pack("<I", TENSOR_VERSION) + pack_shape(arr.shape) + pack_float32(arr)


def decode_tensor(data: bytes) -> Tensor:
    r = BinaryReader(data, "tensor file")
    r.magic(TENSOR_MAGIC)
    r.version(TENSOR_VERSION)
    shape = r.shape()
    values = r.float32s(shape)
    r.finish()
    return values.astype(np.float64)


def save_tensor(path, t) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path) -> Tensor:
    return decode_tensor(Path(path).read_bytes())
