"""Versioned binary checkpoint container.

Layout::

    PEPIPE-CKPT-v1\\n
    <header length, 8-byte little-endian>
    <JSON header: meta, optimizer scalars, tensor table>
    <raw little-endian tensor bytes, in table order>

The header is written with sorted keys so identical contents give identical
bytes.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import LoadError
from .optim import OptimizerState

MAGIC = b"PEPIPE-CKPT-v1\n"


@dataclass
class Checkpoint:
    params: dict
    meta: dict = field(default_factory=dict)
    optimizer: OptimizerState | None = None


def _table(prefix, arrays, offset, table, blobs):
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        table.append({
            "name": prefix + name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str.lstrip("<>|="),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    return offset


def save_checkpoint(path, params, meta=None, optimizer=None):
    table, blobs = [], []
    offset = _table("param/", params, 0, table, blobs)
    header = {"meta": meta or {}, "tensors": table}
    if optimizer is not None:
        _table("optim/", optimizer.buffers(), offset, table, blobs)
        header["optimizer"] = optimizer.scalars()
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    return path


def load_checkpoint(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(MAGIC):
        raise LoadError(f"{path}: not a PEPIPE-CKPT-v1 file")
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    try:
        header = json.loads(raw[pos : pos + hlen])
    except ValueError as exc:
        raise LoadError(f"{path}: corrupt header") from exc
    body = raw[pos + hlen :]
    params, buffers = {}, {}
    for entry in header["tensors"]:
        chunk = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise LoadError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        arr = arr.astype(np.dtype(entry["dtype"])).reshape(entry["shape"])
        kind, name = entry["name"].split("/", 1)
        (params if kind == "param" else buffers)[name] = arr
    optimizer = None
    if "optimizer" in header:
        optimizer = OptimizerState.restore(header["optimizer"], buffers)
    return Checkpoint(params, header.get("meta", {}), optimizer)
