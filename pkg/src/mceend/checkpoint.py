"""Flat binary checkpoint container.

Layout (all integers little-endian):

    bytes 0..3    magic  b"MCED"
    bytes 4..7    format version (uint32, currently 1)
    bytes 8..15   manifest length in bytes (uint64)
    manifest      UTF-8 JSON: {"meta": {...}, "tensors": [entry, ...]}
    data          raw little-endian arrays, back to back

Each manifest entry records name, shape, dtype and the byte offset of the
tensor inside the data section. Writes are atomic (write to a temporary
file, then rename).
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"MCED"
VERSION = 1


def save_container(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.name,
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"meta": meta, "tensors": entries}).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise DataError(f"{path}: not a checkpoint container")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise DataError(f"{path}: unsupported container version {version}")
        (manifest_len,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(manifest_len).decode("utf-8"))
        data = f.read()
    tensors = {}
    for entry in manifest["tensors"]:
        start = entry["offset"]
        blob = data[start : start + entry["nbytes"]]
        arr = np.frombuffer(blob, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return tensors, manifest["meta"]
