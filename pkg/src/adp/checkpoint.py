"""Checkpoint files.

Layout::

    b"ADPCKPT1"
    uint64 LE   header length in bytes
    header      UTF-8 JSON: {"tensors": [{"name", "shape", "offset"}, ...]}
    data        raw little-endian float64 values; offsets are relative to
                the start of this section
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ADPCKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    manifest, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": manifest}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    (length,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + length].decode("utf-8"))
    base = 16 + length
    out = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=base + entry["offset"])
        out[entry["name"]] = arr.astype(np.float64).reshape(shape)
    return out


def restore_parameters(model, tensors: dict[str, np.ndarray]) -> None:
    """Copy checkpoint values into ``model``; every mismatch is reported by name."""
    params = dict(model.named_parameters())
    problems = []
    for name in sorted(set(params) - set(tensors)):
        problems.append(f"{name}: missing from checkpoint")
    for name in sorted(set(tensors) - set(params)):
        problems.append(f"{name}: not a parameter of the model")
    for name in sorted(set(params) & set(tensors)):
        if params[name].shape != tensors[name].shape:
            problems.append(f"{name}: shape {tensors[name].shape} in checkpoint, {params[name].shape} in model")
    if problems:
        raise CheckpointError("checkpoint does not match architecture:\n  " + "\n  ".join(problems))
    for name, t in params.items():
        t.data = tensors[name].copy()
