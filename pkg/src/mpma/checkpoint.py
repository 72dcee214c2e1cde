"""Checkpoint container.

Layout: ``b"MPMA1"``, a little-endian uint64 manifest length, the UTF-8 JSON
manifest, then each array's raw little-endian bytes in manifest order. The
manifest lists ``name``, ``shape`` and ``dtype`` per array and carries the
full model configuration plus free-form training state.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

MAGIC = b"MPMA1"
_LEN = struct.Struct("<Q")
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], config: Mapping, state: Optional[Mapping] = None) -> None:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        tag = arr.dtype.name
        if tag not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {tag}")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": tag})
        blobs.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    manifest = json.dumps(
        {"format": "MPMA1", "config": dict(config), "state": dict(state or {}), "arrays": entries},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    """Return ``(arrays, config, state)``."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not an MPMA1 checkpoint")
    off = len(MAGIC)
    (mlen,) = _LEN.unpack_from(raw, off)
    off += _LEN.size
    try:
        manifest = json.loads(raw[off : off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    off += mlen
    arrays = {}
    for e in manifest["arrays"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated at array {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(e["shape"]).astype(e["dtype"])
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return arrays, manifest["config"], manifest["state"]
