"""Flat named-tensor checkpoint container.

A checkpoint maps tensor names to float64 arrays plus a small JSON metadata
tree.  The on-disk layout is fixed bit-exactly so that identical inputs always
produce identical files:

  bytes 0..7    little-endian uint64: byte length of the JSON header
  header        UTF-8 JSON with sorted keys and no whitespace:
                  {"meta": {...},
                   "tensors": [{"name": str, "shape": [int, ...],
                                "dtype": "<f8", "offset": int}, ...]}
                tensor entries are sorted by name; "offset" is relative to
                the start of the payload
  payload       the tensors' raw bytes, C-order, little-endian float64,
                concatenated in header order

Arrays of any float dtype are accepted and stored as float64.
"""

from __future__ import annotations

import json
import struct

import numpy as np

_DTYPE = "<f8"


def write_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``tensors`` (name -> array) and ``meta`` to ``path``."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=_DTYPE)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": _DTYPE, "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"meta": meta or {}, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint written by :func:`write_tensors`."""
    with open(path, "rb") as fh:
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise ValueError(f"{path}: truncated header length")
        (header_len,) = struct.unpack("<Q", raw_len)
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=entry["dtype"], count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).copy()
    return tensors, header["meta"]
