"""Versioned flat checkpoint archive.

Layout::

    b"UNISLPCK" | u32 version | u64 header length | JSON header | float64 payload

All integers and floats are little-endian. The header holds the model
config, free-form metadata and, per tensor, its name, shape and element
offset into the payload. Tensors are written in sorted name order so the
same contents always produce the same bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"UNISLPCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: dict[str, np.ndarray], config: dict | None = None, meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps(
        {"config": config or {}, "meta": meta or {}, "tensors": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict, dict, dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint archive")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[20:20 + hlen])
    payload = np.frombuffer(blob[20 + hlen:], dtype="<f8")
    params = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        params[e["name"]] = payload[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return header["config"], header["meta"], params


def save(path, params: dict[str, np.ndarray], config: dict | None = None, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(params, config, meta))
    return path


def load(path) -> tuple[dict, dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    return loads(path.read_bytes())
