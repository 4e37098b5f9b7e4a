"""MTEN binary tensor files.

Layout: ``b"MTEN"``, one dtype byte (0 = float32, 1 = float64), one ndim
byte, ``ndim`` little-endian uint64 dims, then the raw little-endian values.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MTEN"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        code = 0
    elif arr.dtype == np.float64:
        code = 1
    else:
        raise TypeError(f"MTEN stores float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("too many dimensions for MTEN")
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def from_bytes(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise ValueError(f"{source}: bad MTEN magic at offset 0")
    code, ndim = struct.unpack_from("<BB", buf, 4)
    if code not in _CODES:
        raise ValueError(f"{source}: unknown dtype code {code} at offset 4")
    end = 6 + 8 * ndim
    if len(buf) < end:
        raise ValueError(f"{source}: truncated shape header at offset 6")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 6)
    dt = _CODES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    if len(buf) - end != count * dt.itemsize:
        raise ValueError(f"{source}: payload has {len(buf) - end} bytes, expected {count * dt.itemsize} (offset {end})")
    return np.frombuffer(buf, dtype=dt, count=count, offset=end).reshape(shape).astype(dt.newbyteorder("="))


def save(path, arr: np.ndarray) -> None:
    path = Path(path)
    try:
        path.write_bytes(to_bytes(arr))
    except OSError as exc:
        raise OSError(f"cannot write tensor file {path}: {exc}") from exc


def load(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read tensor file {path}: {exc}") from exc
    return from_bytes(buf, str(path))
