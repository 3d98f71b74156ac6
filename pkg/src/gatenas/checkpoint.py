"""Checkpoint persistence: JSON manifest + little-endian float64 blob.

The manifest lists array names and shapes in blob order plus whatever
run metadata the caller supplies. Everything numeric round-trips
bit-exactly. A checkpoint written to ``foo.json`` stores its blob next
to it as ``foo.bin``.
"""

import json
import os

import numpy as np


class CheckpointError(ValueError):
    """Raised when a checkpoint cannot be read or fails validation."""


def _blob_path(manifest_path):
    root, _ = os.path.splitext(str(manifest_path))
    return root + ".bin"


def save_checkpoint(path, manifest, arrays):
    """Write manifest (dict) and arrays (ordered (name, ndarray) pairs)."""
    entries = []
    chunks = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    doc = dict(manifest)
    doc["arrays"] = entries
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
    os.replace(tmp, str(path))
    blob = _blob_path(path)
    with open(blob + ".tmp", "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(blob + ".tmp", blob)


def load_checkpoint(path):
    """Read back (manifest, {name: ndarray}); validates sizes."""
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest {path}: {exc}") from exc
    entries = manifest.get("arrays")
    if not isinstance(entries, list):
        raise CheckpointError(f"checkpoint {path} has no array index")
    try:
        raw = np.fromfile(_blob_path(path), dtype="<f8")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint blob for {path}: {exc}") from exc
    arrays = {}
    off = 0
    for entry in entries:
        shape = tuple(entry["shape"])
        size = 1
        for s in shape:
            size *= s
        if off + size > raw.size:
            raise CheckpointError(f"checkpoint blob for {path} is truncated "
                                  f"at array {entry['name']!r}")
        arrays[entry["name"]] = raw[off:off + size].reshape(shape).copy()
        off += size
    if off != raw.size:
        raise CheckpointError(f"checkpoint blob for {path} has {raw.size - off} "
                              "trailing values")
    return manifest, arrays
