"""Versioned checkpoint container shared by the recognizer and the LM.

Layout: 8 magic bytes ``FJCKPT1\\n``, a big-endian uint32 header length,
a UTF-8 JSON header with the config manifest and an ordered parameter
table (name and shape), then the raw little-endian float64 buffers
concatenated in table order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"FJCKPT1\n"


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray],
                    config: dict) -> None:
    path = Path(path)
    names = sorted(arrays)
    header = {
        "config": config,
        "params": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(">I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: bad checkpoint magic, expected {MAGIC!r}")
    off = len(MAGIC)
    (blob_len,) = struct.unpack(">I", raw[off:off + 4])
    off += 4
    header = json.loads(raw[off:off + blob_len].decode("utf-8"))
    off += blob_len
    arrays: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        buf = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        arrays[entry["name"]] = buf.reshape(shape).astype(np.float64)
        off += count * 8
    if off != len(raw):
        raise DataError(f"{path}: trailing bytes after parameter buffers")
    return arrays, header["config"]
