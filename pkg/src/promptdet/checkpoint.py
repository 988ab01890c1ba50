"""Named-tensor container: a JSON manifest line followed by raw little-endian payload.

File layout::

    {"meta": {...}, "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}, ...]}\\n
    <payload bytes>

The manifest is compact JSON with sorted keys, so it never contains a raw
newline and identical contents always serialise to identical bytes.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "|u1"}


def dumps(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        key = arr.dtype.name
        if key not in _DTYPES:
            raise TypeError(f"unsupported dtype {key} for tensor {name!r}")
        raw = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[key])).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": key,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": dict(meta or {}), "tensors": entries},
                          sort_keys=True, separators=(",", ":"))
    return manifest.encode("utf-8") + b"\n" + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    head, sep, payload = blob.partition(b"\n")
    if not sep:
        raise ValueError("checkpoint has no manifest terminator")
    manifest = json.loads(head.decode("utf-8"))
    tensors = {}
    for e in manifest["tensors"]:
        raw = payload[e["offset"]: e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ValueError(f"truncated payload for {e['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(_DTYPES[e["dtype"]])).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(e["dtype"])
    return tensors, manifest["meta"]


def save(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def tensor_digest(arrays: Mapping[str, np.ndarray], names=None) -> str:
    """SHA-256 over the raw bytes of the named arrays (all, in key order, by default)."""
    h = hashlib.sha256()
    for name in (names if names is not None else sorted(arrays)):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(arr.tobytes())
    return h.hexdigest()
