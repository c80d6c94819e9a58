"""Named-tensor checkpoint files.

Layout (all integers little-endian):

    magic   4 bytes  "RPTC"
    version u32      currently 1
    count   u32      number of entries
    entry:  name_len u32, name utf-8, rank u32, dims rank x u64,
            payload prod(dims) x f32 little-endian

Round-trips are bit-exact; only float32 arrays are accepted.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"RPTC"
VERSION = 1


def save_tensors(path, named: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(named))]
    for name, arr in named.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise FormatError(f"checkpoint entry '{name}' must be float32, got {arr.dtype}")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return buf


def load_tensors(path) -> "OrderedDict[str, np.ndarray]":
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise FormatError(f"{path}: not a checkpoint file (bad magic)")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, "dims")) if rank else ()
            numel = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = _read_exact(f, 4 * numel, f"payload of '{name}'")
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after last entry")
    return out
