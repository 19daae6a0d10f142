"""FMAP binary feature-map files.

Layout, little-endian throughout::

    offset 0   4 bytes   magic b"FMAP"
    offset 4   u32       version (1)
    offset 8   u32       H
    offset 12  u32       W
    offset 16  u32       C
    offset 20  f64[H*W*C] values, pixel-major (row i = h*W + w), channel fastest
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .blocks import FeatureMap

__all__ = ["FmapFormatError", "MAGIC", "VERSION", "encode", "decode", "read_fmap", "write_fmap"]

MAGIC = b"FMAP"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class FmapFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def encode(fm: FeatureMap) -> bytes:
    head = _HEADER.pack(MAGIC, VERSION, fm.height, fm.width, fm.channels)
    return head + fm.values.astype("<f8").tobytes()


def decode(data: bytes) -> FeatureMap:
    if len(data) < 4:
        raise FmapFormatError("truncated magic", len(data))
    if data[:4] != MAGIC:
        raise FmapFormatError(f"bad magic {data[:4]!r}", 0)
    if len(data) < _HEADER.size:
        raise FmapFormatError("truncated header", len(data))
    _, version, h, w, c = _HEADER.unpack_from(data)
    if version != VERSION:
        raise FmapFormatError(f"unsupported version {version}", 4)
    for off, name, val in ((8, "H", h), (12, "W", w), (16, "C", c)):
        if val < 1:
            raise FmapFormatError(f"{name} must be positive", off)
    need = _HEADER.size + 8 * h * w * c
    if len(data) < need:
        raise FmapFormatError(f"truncated values: expected {need} bytes, got {len(data)}", len(data))
    if len(data) > need:
        raise FmapFormatError(f"{len(data) - need} trailing bytes", need)
    values = np.frombuffer(data, dtype="<f8", count=h * w * c, offset=_HEADER.size)
    return FeatureMap(h, w, values.astype(np.float64).reshape(h * w, c))


def write_fmap(path, fm: FeatureMap) -> None:
    Path(path).write_bytes(encode(fm))


def read_fmap(path) -> FeatureMap:
    return decode(Path(path).read_bytes())
