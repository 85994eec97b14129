"""Flat little-endian tensor container with a JSON sidecar.

The binary file is the raw concatenation of the arrays; the sidecar records
name, dtype, shape and byte offset of each, plus a SHA-256 of the whole file.
Unlike ``np.savez`` the output carries no timestamps, so identical inputs give
byte-identical files.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np


class ChecksumError(IOError):
    pass


def write_tensors(path: str | Path, arrays: dict[str, np.ndarray], dtype: str = "<f4") -> dict:
    entries = []
    offset = 0
    digest = hashlib.sha256()
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes()
            fh.write(raw)
            digest.update(raw)
            entries.append({"name": name, "dtype": dtype, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    return {"tensors": entries, "sha256": digest.hexdigest(), "nbytes": offset}


def read_tensors(path: str | Path, index: dict) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if hashlib.sha256(raw).hexdigest() != index["sha256"]:
        raise ChecksumError(f"{path}: checksum mismatch")
    out = {}
    for entry in index["tensors"]:
        chunk = raw[entry["offset"] : entry["offset"] + entry["nbytes"]]
        out[entry["name"]] = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return out
