"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"LVPS" | u32 version | u32 header length | UTF-8 JSON header | float64 data

The header lists ``{"name", "shape"}`` records in storage order plus a free-form
``meta`` mapping; tensors follow as row-major little-endian float64.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LVPS"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    names = list(tensors)
    arrays = [np.asarray(tensors[n], dtype="<f8") for n in names]
    header = {
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(a.tobytes(order="C"))


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    offset = 12 + hlen
    tensors = {}
    for rec in header["tensors"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated tensor {rec['name']!r}")
        tensors[rec["name"]] = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return tensors, header.get("meta", {})
