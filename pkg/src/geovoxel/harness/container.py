"""Tensor container: a JSON sidecar describing a raw little-endian blob.

``<stem>.json`` holds ``{"name", "dtype", "shape", "order", "endianness",
"blob"}`` and ``<stem>.bin`` holds the row-major bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import InputError

DTYPES = {"f32": "<f4", "f64": "<f8", "i32": "<i4", "u8": "u1"}
_REVERSE = {np.dtype(v).str: k for k, v in DTYPES.items()}


def dtype_tag(arr):
    tag = _REVERSE.get(np.dtype(arr.dtype).newbyteorder("<").str)
    if tag is None:
        raise InputError(f"unsupported dtype {arr.dtype}; use one of {sorted(DTYPES)}")
    return tag


def write_tensor(path, array, name=None, dtype=None):
    """Write ``array`` as ``<path>.json`` + ``<path>.bin``; returns the sidecar path.

    ``path`` may be given with or without the ``.json`` suffix.
    """
    stem = Path(path)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    array = np.asarray(array)
    tag = dtype if dtype is not None else dtype_tag(array)
    if tag not in DTYPES:
        raise InputError(f"unknown dtype tag {tag!r}")
    out = np.ascontiguousarray(array, dtype=DTYPES[tag])
    stem.parent.mkdir(parents=True, exist_ok=True)
    blob = stem.with_suffix(".bin")
    blob.write_bytes(out.tobytes(order="C"))
    meta = {
        "name": name if name is not None else stem.name,
        "dtype": tag,
        "shape": [int(n) for n in out.shape],
        "order": "row-major",
        "endianness": "little",
        "blob": blob.name,
    }
    sidecar = stem.with_suffix(".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return sidecar


def read_tensor(path):
    """Load a container written by :func:`write_tensor` (sidecar or stem path)."""
    sidecar = Path(path)
    if sidecar.suffix != ".json":
        sidecar = sidecar.with_suffix(".json") if sidecar.suffix == ".bin" else Path(str(sidecar) + ".json")
    meta = json.loads(sidecar.read_text())
    if meta.get("order", "row-major") != "row-major" or meta.get("endianness", "little") != "little":
        raise InputError(f"{sidecar}: only row-major little-endian blobs are supported")
    tag = meta["dtype"]
    if tag not in DTYPES:
        raise InputError(f"{sidecar}: unknown dtype {tag!r}")
    shape = tuple(int(n) for n in meta["shape"])
    blob = sidecar.parent / meta.get("blob", sidecar.with_suffix(".bin").name)
    raw = blob.read_bytes()
    expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(DTYPES[tag]).itemsize
    if len(raw) != expected:
        raise InputError(f"{blob}: {len(raw)} bytes, expected {expected} for shape {shape}")
    return np.frombuffer(raw, dtype=DTYPES[tag]).reshape(shape).copy()
