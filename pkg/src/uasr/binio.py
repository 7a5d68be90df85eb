"""Shared framing helpers for the project's binary file formats.

Every binary artifact (feature files, LM dumps, checkpoints) starts with a
4-byte magic and a u32 version, followed by format-specific payload. All
integers and floats are little-endian.
"""

from __future__ import annotations

import struct
from typing import BinaryIO


class BinaryFormatError(Exception):
    """Base class for malformed binary artifacts."""


class BadMagicError(BinaryFormatError):
    pass


class BadVersionError(BinaryFormatError):
    pass


class TruncatedFileError(BinaryFormatError):
    pass


def read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"expected {n} bytes, got {len(data)}")
    return data


def write_header(fh: BinaryIO, magic: bytes, version: int) -> None:
    assert len(magic) == 4
    fh.write(magic)
    fh.write(struct.pack("<I", version))


def read_header(fh: BinaryIO, magic: bytes, version: int) -> None:
    got = fh.read(4)
    if len(got) < 4 or got != magic:
        raise BadMagicError(f"expected magic {magic!r}, got {got!r}")
    (ver,) = struct.unpack("<I", read_exact(fh, 4))
    if ver != version:
        raise BadVersionError(f"expected version {version}, got {ver}")


def pack_u32(fh: BinaryIO, *values: int) -> None:
    fh.write(struct.pack(f"<{len(values)}I", *values))


def unpack_u32(fh: BinaryIO, count: int) -> tuple[int, ...]:
    return struct.unpack(f"<{count}I", read_exact(fh, 4 * count))


def pack_i64(fh: BinaryIO, *values: int) -> None:
    fh.write(struct.pack(f"<{len(values)}q", *values))


def unpack_i64(fh: BinaryIO, count: int) -> tuple[int, ...]:
    return struct.unpack(f"<{count}q", read_exact(fh, 8 * count))


def pack_f64(fh: BinaryIO, *values: float) -> None:
    fh.write(struct.pack(f"<{len(values)}d", *values))


def unpack_f64(fh: BinaryIO, count: int) -> tuple[float, ...]:
    return struct.unpack(f"<{count}d", read_exact(fh, 8 * count))


def pack_str(fh: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    pack_u32(fh, len(raw))
    fh.write(raw)


def unpack_str(fh: BinaryIO) -> str:
    (n,) = unpack_u32(fh, 1)
    return read_exact(fh, n).decode("utf-8")
