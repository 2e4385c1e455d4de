"""Canonical JSON and content hashing used for reproducible artifacts.

Every on-disk JSON document in this package goes through :func:`canonical_dumps`
so that identical inputs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np

__all__ = [
    "canonical_dumps",
    "read_json",
    "sha256_array",
    "sha256_arrays",
    "sha256_bytes",
    "sha256_file",
    "sha256_json",
    "write_json",
]


def canonical_dumps(obj: Any) -> str:
    """Serialize ``obj`` to a canonical JSON string (sorted keys, no spaces)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_json(path: str | Path, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_dumps(obj) + "\n", encoding="utf-8")
    return path


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_json(obj: Any) -> str:
    return sha256_bytes(canonical_dumps(obj).encode("utf-8"))


def sha256_array(arr: np.ndarray) -> str:
    """Hash an array including its shape and a normalized dtype tag."""
    arr = np.ascontiguousarray(arr)
    h = hashlib.sha256()
    h.update(repr(arr.shape).encode())
    h.update(np.dtype(arr.dtype).str.encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def sha256_arrays(*arrays: np.ndarray) -> str:
    """Hash several arrays in order as a single digest."""
    h = hashlib.sha256()
    for arr in arrays:
        h.update(sha256_array(arr).encode())
    return h.hexdigest()


def sha256_file(path: str | Path, chunk_size: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while chunk := fh.read(chunk_size):
            h.update(chunk)
    return h.hexdigest()
