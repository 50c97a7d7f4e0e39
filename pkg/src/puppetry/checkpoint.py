"""Versioned checkpoint container.

Layout: magic, format version, a JSON header (stage name, architecture
descriptor, epoch counter, free-form metadata, and a tensor index of
name -> dtype/shape/offset), followed by the raw little-endian tensor bytes.
Byte-for-byte deterministic for identical contents, which the fixed-seed
reproducibility guarantees rely on. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError

_MAGIC = b"PCKP"
_VERSION = 1
_PREFIX = struct.Struct("<4sII")  # magic, version, header_length

_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8", "u1": "|u1"}


def _dtype_tag(arr: np.ndarray) -> str:
    for tag, np_dtype in _DTYPES.items():
        if arr.dtype == np.dtype(np_dtype):
            return tag
    raise InvalidInputError(f"unsupported checkpoint dtype {arr.dtype}")


@dataclass
class Checkpoint:
    stage: str
    arch: dict
    tensors: dict
    epoch: int = 0
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    index = {}
    blobs = []
    offset = 0
    for name in ckpt.tensors:
        arr = np.asarray(ckpt.tensors[name])
        if arr.dtype == np.float64:
            arr = arr.astype(np.float32)  # parameters persist as float32
        tag = _dtype_tag(np.asarray(arr))
        data = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        index[name] = {"dtype": tag, "shape": list(arr.shape), "offset": offset,
                       "nbytes": len(data)}
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {"stage": ckpt.stage, "arch": ckpt.arch, "epoch": ckpt.epoch,
         "meta": ckpt.meta, "tensors": index},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(_MAGIC, _VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size or raw[:4] != _MAGIC:
        raise FormatError(f"{path}: not a checkpoint container")
    _, version, header_len = _PREFIX.unpack_from(raw)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + header_len])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: corrupt header: {e}") from e
    base = _PREFIX.size + header_len
    tensors = {}
    for name, entry in header["tensors"].items():
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(raw):
            raise FormatError(f"{path}: tensor {name!r} extends past end of file")
        arr = np.frombuffer(raw[start:end], dtype=_DTYPES[entry["dtype"]])
        tensors[name] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(stage=header["stage"], arch=header["arch"], tensors=tensors,
                      epoch=header["epoch"], meta=header.get("meta", {}))


def require_stage(ckpt: Checkpoint, stage: str, path="checkpoint") -> Checkpoint:
    if ckpt.stage != stage:
        raise InvalidInputError(f"{path}: stage {ckpt.stage!r} where {stage!r} is required")
    return ckpt
