"""The OFT feature container: a tiny binary format for grid-feature pyramids.

Layout (all integers little-endian u32, all floats little-endian f32):

    magic "OFT1" | level count | per level: n, c, then n*c floats

Exactly four levels are required; loading is all-or-nothing.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from capsight.errors import FormatError

MAGIC = b"OFT1"
LEVEL_COUNT = 4


def save_features(path, levels: list[np.ndarray]) -> None:
    """Write a 4-level feature pyramid. Each level must be a 2-d float array."""
    if len(levels) != LEVEL_COUNT:
        raise FormatError(f"expected {LEVEL_COUNT} levels, got {len(levels)}")
    chunks = [MAGIC, struct.pack("<I", LEVEL_COUNT)]
    for level in levels:
        arr = np.ascontiguousarray(level, dtype="<f4")
        if arr.ndim != 2:
            raise FormatError(f"levels must be 2-d [positions, channels], got shape {arr.shape}")
        n, c = arr.shape
        chunks.append(struct.pack("<II", n, c))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_features(path) -> list[np.ndarray]:
    """Read a pyramid back, bit-exactly. Raises FormatError on any corruption."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4:
        raise FormatError(f"{path}: file too short for an OFT header")
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}")
    offset = len(MAGIC)
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if count != LEVEL_COUNT:
        raise FormatError(f"{path}: expected {LEVEL_COUNT} levels, header says {count}")
    levels = []
    for i in range(count):
        if offset + 8 > len(raw):
            raise FormatError(f"{path}: truncated before level {i} header")
        n, c = struct.unpack_from("<II", raw, offset)
        offset += 8
        nbytes = n * c * 4
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated inside level {i} data ({n}x{c})")
        levels.append(np.frombuffer(raw, dtype="<f4", count=n * c, offset=offset).reshape(n, c).copy())
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after level data")
    return levels
