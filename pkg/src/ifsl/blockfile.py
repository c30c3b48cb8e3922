"""Low-level binary container I/O.

All artifact files share one convention: a 4-byte ASCII magic, a little-endian
u16 version, a small fixed header, then float32 payload blocks. Errors are
reported through a small exception hierarchy so callers can tell a wrong file
apart from a damaged one.
"""

from __future__ import annotations

import struct

import numpy as np


class FileFormatError(Exception):
    """Base class for artifact-file problems."""


class BadMagicError(FileFormatError):
    """File does not start with the expected magic tag."""


class TruncatedFileError(FileFormatError):
    """File ends before the declared payload."""


class DimensionMismatchError(FileFormatError):
    """Declared dimensions disagree with the payload or with other artifacts."""


class Writer:
    def __init__(self, magic: bytes, version: int = 1):
        if len(magic) != 4:
            raise ValueError("magic must be exactly 4 bytes")
        self._buf = bytearray(magic)
        self.u16(version)

    def u8(self, x: int):
        self._buf += struct.pack("<B", x)

    def u16(self, x: int):
        self._buf += struct.pack("<H", x)

    def u32(self, x: int):
        self._buf += struct.pack("<I", x)

    def f32_array(self, arr):
        a = np.ascontiguousarray(arr, dtype="<f4")
        self._buf += a.tobytes()

    def getvalue(self) -> bytes:
        return bytes(self._buf)


class Reader:
    def __init__(self, data: bytes, magic: bytes, version: int = 1):
        self._buf = data
        self._pos = 0
        got = self.raw(4)
        if got != magic:
            raise BadMagicError(
                f"expected magic {magic!r}, found {got!r}"
            )
        ver = self.u16()
        if ver != version:
            raise FileFormatError(f"unsupported version {ver} (expected {version})")

    def raw(self, n: int) -> bytes:
        if self._pos + n > len(self._buf):
            raise TruncatedFileError(
                f"file truncated: needed {n} bytes at offset {self._pos}, "
                f"only {len(self._buf) - self._pos} remain"
            )
        out = self._buf[self._pos:self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.raw(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.raw(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.raw(4))[0]

    def f32_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.raw(4 * count), dtype="<f4").copy()

    def expect_end(self):
        if self._pos != len(self._buf):
            raise FileFormatError(
                f"{len(self._buf) - self._pos} trailing bytes after payload"
            )
