"""Binary tensor checkpoint format.

Layout (all integers little-endian):

    magic     4 bytes  b"SDGT"
    version   u32
    count     u32
    per tensor:
        name_len  u32
        name      UTF-8 bytes
        rank      u32
        extents   u64 * rank
        data      f64 * prod(extents), little-endian, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SDGT"
VERSION = 1


def write_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)  # astype below yields a contiguous copy
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype("<f8").tobytes())
    path.write_bytes(b"".join(chunks))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}Q", raw, offset) if rank else ()
        offset += 8 * rank
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).astype(np.float64)
        offset += 8 * n
        out[name] = data.reshape(shape)
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after last tensor")
    return out
