"""Little-endian binary record helpers shared by the on-disk formats.

All container files in this package (weights, checkpoints, ANN indexes,
embedding stores) use the same primitives: fixed-width little-endian
integers, UTF-8 strings with a u16 length prefix, and raw float arrays.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


class FormatError(ValueError):
    """A file does not match its declared binary layout."""


def read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: expected {n} bytes for {what}, got {len(buf)}")
    return buf


def expect_magic(fh: BinaryIO, magic: bytes) -> None:
    got = fh.read(len(magic))
    if got != magic:
        raise FormatError(f"bad magic: expected {magic!r}, got {got!r}")


def write_u8(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<B", value))


def write_u16(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<H", value))


def write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<I", value))


def write_u64(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<Q", value))


def write_f32(fh: BinaryIO, value: float) -> None:
    fh.write(struct.pack("<f", value))


def write_f64(fh: BinaryIO, value: float) -> None:
    fh.write(struct.pack("<d", value))


def read_u8(fh: BinaryIO, what: str = "u8") -> int:
    return struct.unpack("<B", read_exact(fh, 1, what))[0]


def read_u16(fh: BinaryIO, what: str = "u16") -> int:
    return struct.unpack("<H", read_exact(fh, 2, what))[0]


def read_u32(fh: BinaryIO, what: str = "u32") -> int:
    return struct.unpack("<I", read_exact(fh, 4, what))[0]


def read_u64(fh: BinaryIO, what: str = "u64") -> int:
    return struct.unpack("<Q", read_exact(fh, 8, what))[0]


def read_f32(fh: BinaryIO, what: str = "f32") -> float:
    return struct.unpack("<f", read_exact(fh, 4, what))[0]


def read_f64(fh: BinaryIO, what: str = "f64") -> float:
    return struct.unpack("<d", read_exact(fh, 8, what))[0]


def write_str(fh: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"string too long for u16 length prefix: {len(raw)} bytes")
    write_u16(fh, len(raw))
    fh.write(raw)


def read_str(fh: BinaryIO, what: str = "string") -> str:
    n = read_u16(fh, f"{what} length")
    return read_exact(fh, n, what).decode("utf-8")


def write_floats(fh: BinaryIO, values: np.ndarray, dtype: str) -> None:
    """Write a row-major float array as little-endian ``dtype`` ('<f4' or '<f8')."""
    arr = np.ascontiguousarray(values, dtype=dtype)
    fh.write(arr.tobytes())


def read_floats(fh: BinaryIO, count: int, dtype: str, what: str = "floats") -> np.ndarray:
    width = np.dtype(dtype).itemsize
    buf = read_exact(fh, count * width, what)
    return np.frombuffer(buf, dtype=dtype).copy()
