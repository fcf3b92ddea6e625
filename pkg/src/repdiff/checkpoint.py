"""Checkpoint container: magic, JSON header, little-endian float64 payload.

Layout::

    b"RDCKPT\\x00\\x01"   8-byte magic (last byte is the format version)
    uint64 LE           header length in bytes
    header              UTF-8 JSON: {"version", "tensors": [{name, shape, offset, count}], "meta"}
    payload             concatenated float64 LE arrays, in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RDCKPT\x00\x01"
VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps(
        {"version": VERSION, "tensors": entries, "meta": meta or {}}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    if header.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload = np.frombuffer(raw, dtype="<f8", offset=start + hlen)
    out = {}
    for e in header["tensors"]:
        seg = payload[e["offset"] : e["offset"] + e["count"]]
        if len(seg) != e["count"]:
            raise ValueError(f"{path}: truncated payload for {e['name']}")
        out[e["name"]] = seg.reshape(e["shape"]).astype(np.float64)
    return out, header["meta"]
