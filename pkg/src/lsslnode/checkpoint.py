"""Checkpoint container: magic, JSON header, then float32 little-endian payloads.

Layout::

    b"LSSLCKPT" | uint64 LE header length | header JSON (utf-8) | payload

The header lists every tensor with its name, shape, byte offset into the
payload and byte count. Payloads are row-major ``<f4``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

__all__ = ["FORMAT_VERSION", "save_checkpoint", "load_checkpoint", "quantize"]

MAGIC = b"LSSLCKPT"
FORMAT_VERSION = 1


def quantize(arr: np.ndarray) -> np.ndarray:
    """Round to the stored precision and back."""
    return np.asarray(arr, dtype="<f4").astype(np.float64)


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], header: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes(order="C")
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    meta = dict(header or {})
    meta["format_version"] = FORMAT_VERSION
    meta["dtype"] = "<f4"
    meta["tensors"] = entries
    head = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    meta = json.loads(data[16 : 16 + n].decode("utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
    base = 16 + n
    tensors = {}
    for e in meta["tensors"]:
        start = base + e["offset"]
        buf = np.frombuffer(data, dtype="<f4", count=e["nbytes"] // 4, offset=start)
        tensors[e["name"]] = buf.astype(np.float64).reshape(e["shape"])
    return tensors, meta
