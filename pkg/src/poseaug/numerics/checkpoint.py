"""Flat binary container of named float64 arrays.

Layout (all integers little-endian)::

    magic      8 bytes   b"PAUGCKPT"
    version    uint32    currently 1
    index_len  uint64    byte length of the JSON index
    index      JSON      {"version": 1, "meta": {...},
                          "arrays": {name: {"shape": [...], "offset": int}}}
    padding    zero bytes up to the next multiple of 8
    data       concatenated little-endian float64 arrays, C order;
               ``offset`` is relative to the start of this section

``meta`` carries arbitrary JSON (configs, epoch counters, RNG states).
"""

import json
import struct

import numpy as np

MAGIC = b"PAUGCKPT"
VERSION = 1


def save_arrays(path, arrays, meta=None):
    index = {}
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() below emits C order
        index[name] = {"shape": list(arr.shape), "offset": offset}
        blobs.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    header = json.dumps({"version": VERSION, "meta": meta or {}, "arrays": index}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        pos = len(MAGIC) + 12 + len(header)
        fh.write(b"\0" * (-pos % 8))
        for blob in blobs:
            fh.write(blob)


def load_arrays(path):
    """Return ``(arrays, meta)`` from a container written by :func:`save_arrays`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, n = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    index = json.loads(raw[20:20 + n])
    start = 20 + n
    start += -start % 8
    arrays = {}
    for name, entry in index["arrays"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = start + entry["offset"]
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
    return arrays, index.get("meta", {})
