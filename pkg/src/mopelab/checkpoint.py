"""Versioned weight files.

Layout: the ASCII line ``MOPELAB1``, one JSON header line listing every tensor
as ``[name, shape, offset]`` (offset in float64 elements) plus free-form
metadata, then the raw little-endian float64 payload.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"MOPELAB1\n"


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")  # keeps 0-d shapes
        entries.append([name, list(arr.shape), offset])
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(header.encode() + b"\n")
        for c in chunks:
            f.write(c)
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns ``(tensors, meta)``; raises ConfigError on a foreign or truncated file."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ConfigError(f"{path}: not a MOPELAB1 checkpoint")
    nl = raw.find(b"\n", len(MAGIC))
    if nl < 0:
        raise ConfigError(f"{path}: truncated header")
    try:
        header = json.loads(raw[len(MAGIC) : nl])
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: bad header ({e.msg})") from None
    flat = np.frombuffer(raw[nl + 1 :], dtype="<f8")
    out = {}
    for name, shape, offset in header["tensors"]:
        n = int(np.prod(shape, dtype=np.int64))
        if offset + n > flat.size:
            raise ConfigError(f"{path}: payload too short for tensor {name}")
        out[name] = flat[offset : offset + n].reshape(shape).astype(np.float64)
    return out, header.get("meta", {})
