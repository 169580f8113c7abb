"""Versioned binary checkpoints: header JSON + named f32 parameter blobs.

Layout: magic "CKP1", u32 format version, u64 header length, header JSON
(config, config hash, vocabulary, counters), u32 parameter count, then one
name-length-prefixed entry per parameter (u32 name length, name, u32 ndim,
u32 dims, f32 little-endian data). Optimizer first/second moments follow as
two more entry blocks. Reloading restores forward outputs bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from capsight.errors import FormatError

MAGIC = b"CKP1"
VERSION = 1


def config_hash(doc: dict) -> str:
    """Stable hash of the architecture-defining config sections."""
    subset = {key: doc.get(key) for key in ("model", "dataset") if key in doc}
    canon = json.dumps(subset, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _pack_entries(arrays: list[tuple[str, np.ndarray]]) -> list[bytes]:
    chunks = [struct.pack("<I", len(arrays))]
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode()
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    return chunks


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.offset = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.offset:self.offset + n]
        self.offset += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def entries(self) -> list[tuple[str, np.ndarray]]:
        count = self.u32()
        out = []
        for _ in range(count):
            name = self.take(self.u32()).decode()
            ndim = self.u32()
            shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(self.take(4 * size), dtype="<f4").reshape(shape).copy()
            out.append((name, arr))
        return out


def save_checkpoint(path, named_params: list[tuple[str, np.ndarray]], header: dict,
                    moments_m: list[tuple[str, np.ndarray]] | None = None,
                    moments_v: list[tuple[str, np.ndarray]] | None = None) -> None:
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(header_bytes)),
              header_bytes]
    chunks.extend(_pack_entries(named_params))
    chunks.extend(_pack_entries(moments_m or []))
    chunks.extend(_pack_entries(moments_v or []))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    reader = _Reader(raw, path)
    if reader.take(4) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    version = reader.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header_len = struct.unpack("<Q", reader.take(8))[0]
    try:
        header = json.loads(reader.take(header_len).decode())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt checkpoint header ({exc})") from exc
    params = reader.entries()
    moments_m = reader.entries()
    moments_v = reader.entries()
    if reader.offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - reader.offset} trailing bytes")
    return {
        "header": header,
        "params": dict(params),
        "param_order": [name for name, _ in params],
        "moments_m": dict(moments_m),
        "moments_v": dict(moments_v),
    }
