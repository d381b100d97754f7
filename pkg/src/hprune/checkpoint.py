"""Single-file checkpoints with a versioned header and little-endian payload.

Layout (see docs/checkpoint_format.md)::

    offset 0   4 bytes   magic b"HPCK"
    offset 4   uint32    format version
    offset 8   uint64    header length H in bytes
    offset 16  H bytes   UTF-8 JSON header, keys sorted
    ...        padding   zero bytes up to the next multiple of 8
    ...        payload   arrays back to back, each little-endian, C order

Each header ``tensors`` entry records name, dtype, shape, and the byte
offset relative to the start of the payload.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"HPCK"
VERSION = 1
_ALIGN = 8


class CheckpointError(ValueError):
    pass


def save(path, header: dict, arrays: "OrderedDict[str, np.ndarray]") -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        pad = (-len(raw)) % _ALIGN
        if pad:
            blobs.append(b"\0" * pad)
        offset += len(raw) + pad
    header = dict(header)
    header["tensors"] = entries
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(head)))
        fh.write(head)
        fh.write(b"\0" * ((-(16 + len(head))) % _ALIGN))
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    start = 16 + hlen
    start += (-start) % _ALIGN
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=start + e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="), copy=True)
    return header, arrays


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        return json.loads(fh.read(hlen).decode("utf-8"))
