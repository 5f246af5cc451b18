"""Binary array files: one JSON header line, then little-endian float64 data, row-major.

Used for state checkpoints and for the on-disk collision operator cache.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT = "vmblimit-array"
VERSION = 1


class ArrayFileError(IOError):
    pass


def content_hash(payload: Mapping[str, Any]) -> str:
    """Stable sha256 of a JSON-serializable mapping."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=repr)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_arrays(path: str | os.PathLike, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> Path:
    """Write named arrays atomically (temp file, then rename)."""
    path = Path(path)
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        blobs.append(a)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "dtype": "<f8",
        "order": "C",
        "arrays": entries,
        "meta": dict(meta or {}),
    }
    line = json.dumps(header, sort_keys=True, default=repr)
    if "\n" in line:
        raise ArrayFileError("header must fit on one line")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(line.encode("utf-8") + b"\n")
        for a in blobs:
            fh.write(a.tobytes(order="C"))
    os.replace(tmp, path)
    return path


def read_header(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        return _parse_header(fh.readline())


def _parse_header(line: bytes) -> dict:
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArrayFileError(f"bad header: {exc}") from exc
    if header.get("format") != FORMAT:
        raise ArrayFileError(f"not a {FORMAT} file")
    if header.get("dtype") != "<f8" or header.get("order") != "C":
        raise ArrayFileError("unsupported dtype or order")
    return header


def read_arrays(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    """Return (arrays, meta)."""
    with open(path, "rb") as fh:
        header = _parse_header(fh.readline())
        raw = fh.read()
    # a partial trailing element means the file was cut short
    data = np.frombuffer(raw[: len(raw) - len(raw) % 8], dtype="<f8")
    out = {}
    if "arrays" not in header:
        raise ArrayFileError("header lists no arrays")
    for e in header["arrays"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        start = e["offset"]
        if start + size > data.size:
            raise ArrayFileError(f"truncated data for {e['name']!r}")
        out[e["name"]] = data[start:start + size].reshape(e["shape"]).astype(np.float64)
    return out, header["meta"]
