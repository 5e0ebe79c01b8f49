"""Binary parameter records.

Layout, all integers little-endian::

    b"TIDE"  u32 version  u32 record_count
    per record:
        u32 name_len  name (UTF-8)  u8 dtype  u32 rank  u64 dims[rank]
        payload: prod(dims) float64 values, row-major, little-endian

dtype 1 is the only defined code (float64).
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from tide.errors import FormatError

MAGIC = b"TIDE"
VERSION = 1
DTYPE_F64 = 1


def encode(records: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() below is row-major regardless of strides
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", DTYPE_F64, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> dict:
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    records = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("record name is not UTF-8") from None
        dtype, rank = struct.unpack("<BI", take(5))
        if dtype != DTYPE_F64:
            raise FormatError(f"unknown dtype code {dtype} in record {name!r}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(bytes(take(8 * n)), dtype="<f8").astype(np.float64).reshape(dims)
        if name in records:
            raise FormatError(f"duplicate record {name!r}")
        records[name] = arr
    if pos != len(view):
        raise FormatError("trailing bytes after the last record")
    return records


def save(path, records: dict) -> None:
    Path(path).write_bytes(encode(records))


def load(path) -> dict:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    return decode(blob)
