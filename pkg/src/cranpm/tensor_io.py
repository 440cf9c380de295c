"""Binary tensor serialization (CRTN format).

Layout: magic "CRTN", version byte 0x01, dtype byte (0=f32, 1=f64),
u32 ndim, ndim x u64 dims, then the little-endian row-major payload.
No padding anywhere; round-trips are bit-exact.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CRTN"
VERSION = 1
_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODE:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    head = struct.pack("<4sBBI", MAGIC, VERSION, _DTYPE_CODE[arr.dtype], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    return head + dims + payload


def decode(buf: bytes) -> np.ndarray:
    return read_stream(io.BytesIO(buf))


def read_stream(f) -> np.ndarray:
    head = f.read(10)
    if len(head) != 10:
        raise FormatError("truncated header")
    magic, version, dcode, ndim = struct.unpack("<4sBBI", head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dcode not in _CODE_DTYPE:
        raise FormatError(f"unknown dtype code {dcode}")
    dims = struct.unpack(f"<{ndim}Q", f.read(8 * ndim)) if ndim else ()
    dtype = _CODE_DTYPE[dcode]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    payload = f.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError("truncated payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("=")))


def save(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_stream(f)
