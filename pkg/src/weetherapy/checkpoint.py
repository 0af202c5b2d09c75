"""Checkpoint files: named float64 arrays with a frozen/trainable flag each.

Layout (all integers little-endian)::

    b"WEECKPT" + version byte (0x01)
    uint64   header length in bytes
    header   UTF-8 JSON: {"meta": {...}, "entries": [{"name", "shape",
             "trainable", "offset"}, ...]}; offsets count bytes from the
             start of the data block
    data     concatenated little-endian float64 arrays, row-major

The file bytes depend only on the arrays and metadata, so identical models
give identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"WEECKPT"
VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], trainable: dict[str, bool], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "trainable": bool(trainable.get(name, False)),
                        "offset": offset})
        blob = a.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta or {}, "entries": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC + bytes([VERSION]))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, bool], dict]:
    raw = Path(path).read_bytes()
    if raw[:7] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    if raw[7] != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {raw[7]}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    data = raw[16 + hlen:]
    arrays, trainable = {}, {}
    for e in header["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        a = np.frombuffer(data, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = a.astype(np.float64)
        trainable[e["name"]] = e["trainable"]
    return arrays, trainable, header["meta"]


def array_digest(a: np.ndarray) -> str:
    a = np.ascontiguousarray(a, dtype="<f8")
    h = hashlib.sha256()
    h.update(str(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()
