"""Tensor container used for every persisted artifact.

A container is a pair of files sharing a stem::

    <stem>.bin   raw little-endian tensor data, concatenated in index order
    <stem>.json  {"format": "cuelight-tensors", "version": 1,
                  "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}],
                  "metadata": {...}}

Both files are byte-for-byte reproducible for equal inputs.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

FORMAT = "cuelight-tensors"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def container_stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".bin", ".json") else path


def save_tensors(path, tensors: dict, metadata: dict | None = None) -> Path:
    stem = container_stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    index, offset = [], 0
    with open(stem.with_suffix(".bin"), "wb") as fh:
        for name, value in tensors.items():
            if isinstance(value, torch.Tensor):
                value = value.detach().cpu().numpy()
            arr = np.asarray(value)
            dtype = str(arr.dtype)
            if dtype not in _DTYPES:
                raise TypeError(f"unsupported dtype {dtype} for tensor {name!r}")
            data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
            fh.write(data)
            index.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
            offset += len(data)
    header = {"format": FORMAT, "version": VERSION, "tensors": index, "metadata": metadata or {}}
    stem.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return stem


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    stem = container_stem(path)
    header = json.loads(stem.with_suffix(".json").read_text())
    if header.get("format") != FORMAT:
        raise ValueError(f"{stem}.json is not a {FORMAT} container")
    raw = stem.with_suffix(".bin").read_bytes()
    tensors = {}
    for entry in header["tensors"]:
        chunk = raw[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(chunk, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(entry["dtype"])
    return tensors, header["metadata"]


def read_metadata(path) -> dict:
    """Metadata of a container without reading its tensor data."""
    header = json.loads(container_stem(path).with_suffix(".json").read_text())
    if header.get("format") != FORMAT:
        raise ValueError(f"{container_stem(path)}.json is not a {FORMAT} container")
    return header["metadata"]


def exists(path) -> bool:
    stem = container_stem(path)
    return stem.with_suffix(".json").is_file() and stem.with_suffix(".bin").is_file()


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
