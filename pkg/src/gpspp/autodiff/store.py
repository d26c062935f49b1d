"""Flat binary serialization of named float64 tensors.

Layout (little-endian)::

    b"GPSP" | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 count
    then per tensor: u16 name_len | name (UTF-8) | u8 ndim | ndim x u64 dims | float64 data

Names follow ``layer{l}/{module}/{tensor}`` for per-layer weights.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..exceptions import CheckpointError

MAGIC = b"GPSP"
VERSION = 1


def save_params(path, params, metadata=None) -> None:
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(params))]
    for name, value in params.items():
        arr = np.ascontiguousarray(getattr(value, "data", value), dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path):
    """Return ``(params, metadata)`` where ``params`` maps names to arrays."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a parameter file")
    try:
        version, meta_len = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        pos = 12
        metadata = json.loads(buf[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            params[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
            pos += 8 * size
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt parameter file") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return params, metadata
