"""Binary tensor files.

Layout, all little-endian::

    magic (4 bytes) | rank: u32 | rank x dim: u64 | data

``HMT1`` files carry float64 data, ``HMI1`` files carry int64 data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FLOAT_MAGIC = b"HMT1"
INT_MAGIC = b"HMI1"

_DTYPES = {FLOAT_MAGIC: np.dtype("<f8"), INT_MAGIC: np.dtype("<i8")}


class TensorFileError(ValueError):
    pass


def encode(arr, magic: bytes = FLOAT_MAGIC) -> bytes:
    if magic not in _DTYPES:
        raise TensorFileError(f"unknown magic {magic!r}")
    a = np.ascontiguousarray(arr, dtype=_DTYPES[magic])
    header = magic + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + a.tobytes(order="C")


def decode(buf: bytes, magic: bytes | None = None) -> np.ndarray:
    if len(buf) < 8:
        raise TensorFileError("truncated header")
    got = bytes(buf[:4])
    if got not in _DTYPES or (magic is not None and got != magic):
        raise TensorFileError(f"bad magic {got!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 8 * rank
    if len(buf) < off:
        raise TensorFileError("truncated shape")
    shape = struct.unpack_from(f"<{rank}Q", buf, 8)
    dtype = _DTYPES[got]
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) != off + n * dtype.itemsize:
        raise TensorFileError(
            f"payload is {len(buf) - off} bytes, expected {n * dtype.itemsize} for shape {shape}"
        )
    arr = np.frombuffer(buf, dtype=dtype, count=n, offset=off).reshape(shape)
    return arr.astype(np.float64 if got == FLOAT_MAGIC else np.int64)


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(encode(arr, FLOAT_MAGIC))


def save_index(path, arr) -> None:
    Path(path).write_bytes(encode(arr, INT_MAGIC))


def load_tensor(path) -> np.ndarray:
    return decode(Path(path).read_bytes(), FLOAT_MAGIC)


def load_index(path) -> np.ndarray:
    return decode(Path(path).read_bytes(), INT_MAGIC)
