"""DLT1 tensor container: b"DLT1", u32 rank, u32 extents, float32 payload (little-endian)."""
from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"DLT1"


class FormatError(ValueError):
    pass


def write_tensor(fh: BinaryIO, array) -> None:
    arr = np.asarray(array, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    """Read one tensor; returned as float64 holding exact float32 values."""
    magic = _read_exact(fh, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "extents")) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    payload = _read_exact(fh, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)


def save_tensor(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        try:
            arr = read_tensor(fh)
        except FormatError as exc:
            raise FormatError(f"{os.fspath(path)}: {exc}") from None
        if fh.read(1):
            raise FormatError(f"{os.fspath(path)}: trailing bytes after tensor payload")
    return arr


def tensor_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()
