"""Versioned binary checkpoint blob: JSON header + raw parameter grids.

Layout: magic ``WGCP`` | uint32 format version | uint64 header length |
UTF-8 JSON header | concatenated C-order array bytes in header order.
The header carries architecture hyperparameters, step count, and RNG
state; writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"WGCP"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    tensors = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        tensors.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = dict(meta)
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = tensors
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header_bytes)) + header_bytes + b"".join(blobs)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, header_len = struct.unpack("<IQ", data[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
    offset = 16 + header_len
    arrays: dict[str, np.ndarray] = {}
    for spec in header.pop("tensors"):
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = dtype.itemsize * count
        arr = np.frombuffer(data[offset : offset + nbytes], dtype=dtype).reshape(spec["shape"])
        arrays[spec["name"]] = arr.copy()
        offset += nbytes
    if offset != len(data):
        raise CheckpointError("checkpoint payload length mismatch")
    return header, arrays
