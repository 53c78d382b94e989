"""Tensor serialization: JSON manifest plus one raw little-endian blob.

Layout (documented here, stable):

  <name>.json   manifest, a JSON object:
                  {"format": "hici-tensors-v1",
                   "blob": "<name>.bin",
                   "tensors": [{"name": str, "shape": [int, ...],
                                "dtype": "f8"|"f4", "offset": int,
                                "nbytes": int}, ...]}
                entries appear in write order; offsets are byte offsets
                into the blob.
  <name>.bin    the concatenation of every tensor's row-major (C order)
                little-endian bytes, in manifest order, no padding.

Round trips are bit-exact for f8. f4 is a storage option for checkpoints
that can tolerate precision loss; compute always happens in f8.
"""

from __future__ import annotations

import json
import os

import numpy as np

FORMAT_TAG = "hici-tensors-v1"

_DTYPES = {"f8": np.dtype("<f8"), "f4": np.dtype("<f4")}


def save_tensors(prefix, tensors, dtype="f8"):
    """Write `{name: ndarray}` to `<prefix>.json` + `<prefix>.bin`.

    Iteration order of the mapping defines blob order. Returns the
    manifest path.
    """
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}; use one of {sorted(_DTYPES)}")
    np_dtype = _DTYPES[dtype]
    entries = []
    offset = 0
    blob_path = f"{prefix}.bin"
    manifest_path = f"{prefix}.json"
    with open(blob_path, "wb") as blob:
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np_dtype)
            raw = arr.tobytes(order="C")
            blob.write(raw)
            entries.append({
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype,
                "offset": offset,
                "nbytes": len(raw),
            })
            offset += len(raw)
    manifest = {
        "format": FORMAT_TAG,
        "blob": os.path.basename(blob_path),
        "tensors": entries,
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest_path


def load_tensors(prefix):
    """Read tensors written by `save_tensors`; returns `{name: ndarray}` (f8)."""
    manifest_path = f"{prefix}.json"
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT_TAG:
        raise ValueError(f"{manifest_path}: unknown format {manifest.get('format')!r}")
    blob_path = os.path.join(os.path.dirname(manifest_path), manifest["blob"])
    with open(blob_path, "rb") as fh:
        raw = fh.read()
    out = {}
    for e in manifest["tensors"]:
        dt = _DTYPES[e["dtype"]]
        n = int(np.prod(e["shape"], dtype=np.int64)) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype=dt, count=n, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return out
