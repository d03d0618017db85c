"""Little-endian binary helpers shared by the on-disk artifact formats."""

from __future__ import annotations

import hashlib
import os
import struct

import numpy as np


class FormatError(ValueError):
    """Raised when an artifact file is malformed or of the wrong kind."""


class Reader:
    """Sequential reader over a bytes buffer with truncation checks."""

    def __init__(self, data: bytes, what: str = "file"):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected))
        if got != expected:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {expected!r}")

    def unpack(self, fmt: str):
        size = struct.calcsize("<" + fmt)
        values = struct.unpack("<" + fmt, self.take(size))
        return values if len(values) > 1 else values[0]

    def array(self, shape, dtype: str = "<f4") -> np.ndarray:
        dt = np.dtype(dtype)
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * dt.itemsize
        if nbytes > len(self.data) - self.pos:
            raise FormatError(f"{self.what}: truncated array of shape {tuple(shape)}")
        arr = np.frombuffer(self.take(nbytes), dtype=dt).reshape(shape)
        return arr.copy()

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} trailing bytes")


def f32(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def f64(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def write_bytes(path, payload: bytes) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(payload)


def digest(payload: bytes, size: int = 8) -> bytes:
    return hashlib.sha256(payload).digest()[:size]
