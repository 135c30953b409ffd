"""Named-tensor archive.

Layout::

    b"GGSARCH1"                      8-byte magic
    <uint64 little-endian>           header length in bytes
    header (UTF-8 JSON)              {"tensors": [{name, shape, dtype, offset}], "manifest": {...}}
    data                             concatenated little-endian tensor bytes

Offsets are relative to the start of the data section. Floating tensors are
stored as ``<f4`` unless they are 64-bit, which are kept as ``<f8`` so 64-bit
runs resume bit-exactly.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"GGSARCH1"
_DTYPES = {"<f4": np.float32, "<f8": np.float64, "<i8": np.int64}


class CheckpointError(Exception):
    pass


def _code(t: torch.Tensor) -> str:
    if t.dtype == torch.float64:
        return "<f8"
    if t.is_floating_point():
        return "<f4"
    return "<i8"


def save_archive(path: str | os.PathLike, tensors: dict[str, torch.Tensor], manifest: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        code = _code(t)
        # ascontiguousarray promotes 0-d to 1-d, so record the tensor's own shape
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype=code)
        entries.append({"name": name, "shape": list(t.shape), "dtype": code, "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"tensors": entries, "manifest": manifest}).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load_archive(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive (bad magic)")
    try:
        (n,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16:16 + n].decode())
        data = memoryview(raw)[16 + n:]
        tensors = {}
        for e in header["tensors"]:
            dt = np.dtype(_DTYPES[e["dtype"]]).newbyteorder("<")
            count = int(np.prod(e["shape"], dtype=np.int64))
            end = e["offset"] + count * dt.itemsize
            if end > len(data):
                raise CheckpointError(f"{path}: tensor {e['name']} runs past end of file")
            arr = np.frombuffer(data[e["offset"]:end], dtype=dt).reshape(e["shape"])
            tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")))
        return tensors, header["manifest"]
    except CheckpointError:
        raise
    except (ValueError, KeyError, TypeError, struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupted checkpoint header ({e})") from e
