"""Weight archive: a directory holding named float64 arrays bit-exactly.

Layout:
  ``manifest.json``  name -> {shape, dtype, offset} (offset in bytes
                     into the blob, entries concatenated in manifest order)
  ``weights.bin``    little-endian float64 values, row-major
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensor import Tensor

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "weights.bin"


def save_archive(directory, arrays: dict) -> None:
    """Write arrays (numpy or Tensor values) under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {}
    offset = 0
    chunks = []
    for name, value in arrays.items():
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        data = np.ascontiguousarray(data, dtype=np.float64)
        manifest[name] = {
            "shape": list(data.shape),
            "dtype": "float64",
            "offset": offset,
        }
        raw = data.astype("<f8").tobytes()
        chunks.append(raw)
        offset += len(raw)
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=False))
    (directory / BLOB_NAME).write_bytes(b"".join(chunks))


def load_archive(directory) -> dict:
    """Read an archive back as ``{name: np.ndarray}`` (float64)."""
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_NAME).read_text())
    blob = (directory / BLOB_NAME).read_bytes()
    out = {}
    for name, entry in manifest.items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        out[name] = arr.reshape(shape).astype(np.float64)
    return out
