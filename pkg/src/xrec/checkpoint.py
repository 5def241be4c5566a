"""Versioned binary checkpoints: magic, version, JSON header, raw float64 arrays.

Layout::

    b"XRECCKPT" | uint32 version | uint32 header length | header (UTF-8 JSON) | data

The header holds ``kind``, ``config``, ``extra`` and an ``arrays`` index of
``{name, shape, offset}``; offsets are in bytes from the start of the data block.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"XRECCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, kind: str, config: dict, arrays: dict[str, np.ndarray], extra: dict | None = None) -> None:
    index, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"kind": kind, "config": config, "extra": extra or {}, "arrays": index}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path, expect_kind: str | None = None):
    """Return ``(kind, config, arrays, extra)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not an xrec checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if expect_kind is not None and header["kind"] != expect_kind:
        raise CheckpointError(f"{path}: expected a {expect_kind!r} checkpoint, found {header['kind']!r}")
    base = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(shape).copy()
    return header["kind"], header["config"], arrays, header["extra"]
