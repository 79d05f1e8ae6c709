"""Checkpoint format: JSON manifest plus a little-endian raw value blob.

A checkpoint stem ``X`` produces ``X.json`` (names, shapes, dtype, byte
offsets plus free-form metadata) and ``X.bin`` (the concatenated array
bytes).  Round trips are bit-exact.
"""

from __future__ import annotations

import json
import os

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(stem: str, arrays: dict, meta: dict | None = None) -> None:
    entries = []
    offset = 0
    blob_parts = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = arr.dtype.newbyteorder("<")
        raw = arr.astype(dtype, copy=False).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": dtype.str,
            "offset": offset,
            "nbytes": len(raw),
        })
        blob_parts.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "tensors": entries,
    }
    os.makedirs(os.path.dirname(os.path.abspath(stem)), exist_ok=True)
    with open(stem + ".bin", "wb") as fh:
        fh.write(b"".join(blob_parts))
    with open(stem + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_checkpoint(stem: str) -> tuple:
    """Returns (arrays dict, meta dict)."""
    with open(stem + ".json") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {manifest.get('format_version')!r}, "
            f"expected {FORMAT_VERSION}")
    with open(stem + ".bin", "rb") as fh:
        blob = fh.read()
    arrays = {}
    for entry in manifest["tensors"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, manifest["meta"]
