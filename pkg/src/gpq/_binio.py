"""Little-endian readers/writers shared by the GPQ* file formats."""

from __future__ import annotations

import struct

import numpy as np

from .errors import BadMagic, Truncated, VersionMismatch


class Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = memoryview(data)
        self.offset = offset

    def take(self, n: int) -> bytes:
        available = len(self.data) - self.offset
        if n > available:
            raise Truncated(self.offset, n, available)
        out = bytes(self.data[self.offset : self.offset + n])
        self.offset += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize("<" + fmt)
        values = struct.unpack("<" + fmt, self.take(size))
        return values[0] if len(values) == 1 else values

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected))
        if got != expected:
            raise BadMagic(f"expected magic {expected!r}, got {got!r}")

    def version(self, supported: int) -> int:
        v = self.unpack("H")
        if v != supported:
            raise VersionMismatch(f"unsupported version {v} (expected {supported})")
        return v

    def array(self, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.take(count * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).reshape(shape).copy()

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset


def pack(fmt: str, *values) -> bytes:
    return struct.pack("<" + fmt, *values)


def f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()
