"""Checkpoint serialization: plain-text manifest + one little-endian blob.

Layout: the first line of the file is compact JSON describing every blob
entry (name, shape, dtype, byte offset), the optimizer step counter, the
ranking-loss coefficient table and any extra metadata; a newline ends the
header and the raw concatenated arrays follow.  Entries are written in
lexicographic name order, so a round trip is bit-exact.
"""

from __future__ import annotations

import json

import numpy as np

from .optim import ParamStore
from .tensor import Tensor

_MOMENT1 = "adam_m"
_MOMENT2 = "adam_v"


def _dtype_tag(arr):
    return {"float32": "f4", "float64": "f8"}[arr.dtype.name]


def _np_dtype(tag):
    return {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}[tag]


def save_checkpoint(path, params, auc_coeffs=None, extra=None):
    entries = []
    blobs = []
    offset = 0
    for name in params.names():
        for kind, arr in (
            ("param", params[name].values),
            (_MOMENT1, params.moments1[name]),
            (_MOMENT2, params.moments2[name]),
        ):
            data = np.ascontiguousarray(arr).astype(
                arr.dtype.newbyteorder("<"), copy=False)
            entries.append({
                "name": f"{kind}/{name}",
                "shape": list(arr.shape),
                "dtype": _dtype_tag(arr),
                "offset": offset,
            })
            raw = data.tobytes()
            blobs.append(raw)
            offset += len(raw)
    manifest = {
        "format": "shapecomplete-checkpoint-v1",
        "step": params.step_count,
        "auc_coeffs": list(map(float, auc_coeffs)) if auc_coeffs is not None else None,
        "extra": extra or {},
        "entries": entries,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("ascii"))
        fh.write(b"\n")
        for raw in blobs:
            fh.write(raw)
    return path


def load_checkpoint(path):
    """Returns (ParamStore, manifest dict)."""
    with open(path, "rb") as fh:
        header = fh.readline()
        manifest = json.loads(header.decode("ascii"))
        blob = fh.read()
    if manifest.get("format") != "shapecomplete-checkpoint-v1":
        raise ValueError(f"unrecognized checkpoint format in {path}")
    store = ParamStore()
    arrays = {}
    for entry in manifest["entries"]:
        dt = _np_dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.frombuffer(
            blob, dtype=dt, count=count, offset=start).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    for key, arr in arrays.items():
        kind, _, name = key.partition("/")
        if kind != "param":
            continue
        store.add(name, Tensor(arr, requires_grad=True, dtype=arr.dtype))
        store.moments1[name] = arrays[f"{_MOMENT1}/{name}"]
        store.moments2[name] = arrays[f"{_MOMENT2}/{name}"]
    store.step_count = int(manifest["step"])
    return store, manifest
