"""Binary checkpoint files: a JSON manifest followed by raw little-endian arrays.

Layout (all integers little-endian)::

    bytes 0..7     magic  b"CLUNACK1"
    bytes 8..15    uint64 manifest length N
    bytes 16..16+N UTF-8 JSON manifest
    remaining      concatenated raw array bytes (C order)

The manifest is ``{"version": 1, "meta": {...}, "tensors": [entry, ...]}`` with
each entry ``{"name", "shape", "dtype", "offset", "nbytes"}``.  ``dtype`` is a
numpy little-endian type string (``"<f4"``, ``"<f8"``, ``"<i8"``) and
``offset`` counts from the first byte after the manifest.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import InputError

MAGIC = b"CLUNACK1"
VERSION = 1


def save_checkpoint(path: str | os.PathLike, arrays: Mapping[str, np.ndarray], meta: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"version": VERSION, "meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)
    return path


def read_manifest(path: str | os.PathLike) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise InputError(f"{path}: not a checkpoint file (bad magic)")
        (n,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(n).decode("utf-8"))
    if manifest.get("version") != VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    return manifest, 16 + n


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    manifest, start = read_manifest(path)
    with open(path, "rb") as fh:
        fh.seek(start)
        payload = fh.read()
    arrays = {}
    for e in manifest["tensors"]:
        chunk = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise InputError(f"{path}: truncated data for {e['name']}")
        arrays[e["name"]] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, manifest["meta"]
