"""Single-file checkpoint container.

Layout: one line of JSON (the manifest) terminated by a newline, then the
raw little-endian buffers back to back in manifest order. The manifest
lists name, dtype, shape, offset and byte count per entry plus a free-form
``extra`` dict, so a file is self-describing and byte-reproducible.
"""

from __future__ import annotations

import json

import numpy as np

_DTYPES = {"f32le": "<f4", "f64le": "<f8", "i32le": "<i4", "i64le": "<i8"}
_NAMES = {np.dtype("<f4"): "f32le", np.dtype("<f8"): "f64le",
          np.dtype("<i4"): "i32le", np.dtype("<i8"): "i64le"}

SCHEMA_VERSION = 1


def save_checkpoint(path, arrays, extra=None):
    """Write named arrays plus an ``extra`` JSON-able dict to ``path``."""
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = np.dtype(arr.dtype).newbyteorder("<")
        if dt not in _NAMES:
            raise ValueError(f"unsupported dtype {arr.dtype} for entry {name!r}")
        blob = arr.astype(dt, copy=False).tobytes()
        entries.append({
            "name": name,
            "dtype": _NAMES[dt],
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    manifest = {"schema": SCHEMA_VERSION, "entries": entries, "extra": extra or {}}
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns (arrays dict, extra dict)."""
    with open(path, "rb") as fh:
        header = fh.readline()
        try:
            manifest = json.loads(header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"malformed checkpoint manifest in {path}: {exc}") from exc
        if manifest.get("schema") != SCHEMA_VERSION:
            raise ValueError(
                f"unsupported checkpoint schema {manifest.get('schema')!r}, expected {SCHEMA_VERSION}")
        data = fh.read()
    arrays = {}
    for entry in manifest["entries"]:
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > len(data):
            raise ValueError(
                f"checkpoint truncated: entry {entry['name']!r} needs bytes "
                f"[{lo}, {lo + n}) but data section has {len(data)}")
        arr = np.frombuffer(data[lo : lo + n], dtype=_DTYPES[entry["dtype"]])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, manifest.get("extra", {})
