"""Versioned binary container for parameters, optimizer state, and features.

Layout: 8-byte magic, uint32 version, uint64 manifest length, UTF-8 JSON
manifest (array entries with name/shape/dtype/offset plus free-form meta),
then the concatenated little-endian raw array bytes. Round trips are
bit-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PGCONTNR"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str.replace(">", "<").replace("=", "<"),
            "offset": offset,
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"entries": entries, "meta": meta or {}},
                          sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for raw in blobs:
            f.write(raw)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (mlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        data = f.read()
    arrays: dict[str, np.ndarray] = {}
    for e in manifest["entries"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = e["offset"]
        arr = np.frombuffer(data, dtype=dt, count=count, offset=start)
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return arrays, manifest["meta"]
