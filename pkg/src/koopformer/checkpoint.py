"""Checkpoint container: ``model.json`` + ``weights.bin``.

A checkpoint is a directory holding a JSON description (kind, model
configuration, format version and a tensor table mapping each name to
its shape and byte offset) next to a flat binary file of little-endian
32-bit floats concatenated in table order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .params import ParamStore

FORMAT_VERSION = 1
WEIGHTS_DTYPE = np.dtype("<f4")


def save_checkpoint(path, kind, config, store):
    """Write ``store`` to directory ``path`` with metadata ``config``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table = []
    offset = 0
    blobs = []
    for name, tensor in store.items():
        blob = np.ascontiguousarray(tensor.data, dtype=WEIGHTS_DTYPE)
        table.append({
            "name": name,
            "shape": list(tensor.data.shape),
            "dtype": "f32le",
            "offset": offset,
            "trainable": bool(tensor.requires_grad),
        })
        blobs.append(blob)
        offset += blob.nbytes
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "tensors": table,
    }
    (path / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    with open(path / "weights.bin", "wb") as fh:
        for blob in blobs:
            fh.write(blob.tobytes())
    return path


def load_checkpoint(path):
    """Read a checkpoint directory; returns (kind, config, ParamStore)."""
    path = Path(path)
    meta_path = path / "model.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format {meta.get('format_version')!r}")
    raw = (path / "weights.bin").read_bytes()
    store = ParamStore()
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(raw, dtype=WEIGHTS_DTYPE, count=count, offset=start)
        store.add(entry["name"], arr.reshape(shape).astype(np.float32),
                  trainable=entry.get("trainable", True))
    return meta["kind"], meta["config"], store
