"""Binary tensor-table checkpoints.

Layout (all integers little-endian):

    magic   4 bytes   b"KMCO"
    version u32       currently 1
    count   u32       number of tensors
    per tensor, sorted by name:
        name_len u32
        name     UTF-8 bytes
        rank     u32
        dims     u64 * rank
        payload  f64 * prod(dims), row-major, little-endian
    optional trailing metadata block:
        meta_len u32
        meta     UTF-8 JSON bytes
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointFormatError

MAGIC = b"KMCO"
VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype=np.float64)
            if not arr.flags["C_CONTIGUOUS"]:  # 0-d arrays are contiguous; rank is kept
                arr = np.ascontiguousarray(arr)
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())
        if metadata is not None:
            raw_meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
            fh.write(struct.pack("<I", len(raw_meta)))
            fh.write(raw_meta)


def _read_exact(fh, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return raw


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict | None]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointFormatError("bad magic bytes (not a KMCO checkpoint)")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != VERSION:
            raise CheckpointFormatError(
                f"unsupported checkpoint version {version} (expected {VERSION})"
            )
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "dims"))
            n_items = int(np.prod(dims)) if rank else 1
            payload = _read_exact(fh, 8 * n_items, f"payload of {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        raw_len = fh.read(4)
        metadata = None
        if raw_len:
            if len(raw_len) != 4:
                raise CheckpointFormatError("truncated metadata length")
            (meta_len,) = struct.unpack("<I", raw_len)
            metadata = json.loads(_read_exact(fh, meta_len, "metadata").decode("utf-8"))
    return tensors, metadata
