"""Low-level helpers for the bit-exact binary containers (TEMB, LATS, CKPT).

Everything is little-endian; readers must consume exactly the declared
payload and reject anything short, long, or mislabeled.
"""

from __future__ import annotations

import struct

import numpy as np


class FormatError(ValueError):
    """A binary container violates its declared format."""


class Reader:
    def __init__(self, data: bytes, name: str = "file"):
        self.data = data
        self.pos = 0
        self.name = name

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"{self.name}: truncated while reading {what} at offset {self.pos} "
                f"(need {n} bytes, {len(self.data) - self.pos} left)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected), "magic")
        if got != expected:
            raise FormatError(f"{self.name}: bad magic {got!r} at offset 0, expected {expected!r}")

    def u32(self, what: str = "u32") -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str = "u64") -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def f32_array(self, count: int, what: str = "f32 payload") -> np.ndarray:
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)

    def f64_array(self, count: int, what: str = "f64 payload") -> np.ndarray:
        raw = self.take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8").copy()

    def expect_eof(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(
                f"{self.name}: {len(self.data) - self.pos} trailing bytes after declared payload")


class Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def magic(self, m: bytes) -> None:
        self.parts.append(m)

    def u32(self, v: int) -> None:
        self.parts.append(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self.parts.append(struct.pack("<Q", v))

    def f32_array(self, arr: np.ndarray) -> None:
        self.parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def f64_array(self, arr: np.ndarray) -> None:
        self.parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def raw(self, b: bytes) -> None:
        self.parts.append(b)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)
