"""Checkpoint container: one file for config plus all parameters.

Layout: magic line, 8-byte little-endian header length, JSON header with
the model kind/config and the parameter manifest, then the raw float64
little-endian payloads concatenated in manifest order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"UNILAT-CKPT-v1\n"


def save_checkpoint(path, kind, config, named_arrays):
    """Write `named_arrays` (iterable of (name, ndarray)) with a config header."""
    items = [(name, np.asarray(arr, dtype=np.float64)) for name, arr in named_arrays]
    header = {
        "kind": kind,
        "config": config,
        "params": [{"name": n, "shape": list(a.shape)} for n, a in items],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, a in items:
            f.write(a.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (kind, config, dict name -> ndarray)."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path} is not a {MAGIC.strip().decode()} checkpoint")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"truncated checkpoint payload in {path}")
            params[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return header["kind"], header["config"], params
