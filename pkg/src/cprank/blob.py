"""Binary tensor blobs.

Layout (little-endian)::

    0-3   b"CPT1"
    4     dtype code, 0x01 = float32
    5     ndim (1-4)
    6-7   zero
    8..   ndim x uint32 dims
    ...   data, C order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CPT1"
DTYPE_F32 = 0x01
HEADER = struct.Struct("<4sBBH")


class BlobFormatError(ValueError):
    """A blob file is malformed (bad magic, dtype, rank, dims or length)."""


def encode_blob(array) -> bytes:
    a = np.asarray(array, dtype=np.float64)
    if not 1 <= a.ndim <= 4:
        raise ValueError(f"blobs hold 1 to 4 dimensions, got {a.ndim}")
    if any(n < 1 or n >= 2 ** 32 for n in a.shape):
        raise ValueError(f"unsupported dims {a.shape}")
    head = HEADER.pack(MAGIC, DTYPE_F32, a.ndim, 0) + struct.pack(f"<{a.ndim}I", *a.shape)
    with np.errstate(over="ignore"):
        data = np.ascontiguousarray(a, dtype="<f4")
    if not np.all(np.isfinite(data)):
        raise ValueError("blob data must be finite in float32")
    return head + data.tobytes()


def _parse_header(buf: bytes) -> tuple[tuple[int, ...], int]:
    if len(buf) < HEADER.size:
        raise BlobFormatError("truncated header")
    magic, dtype, ndim, pad = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BlobFormatError(f"bad magic {magic!r}")
    if dtype != DTYPE_F32:
        raise BlobFormatError(f"unsupported dtype code {dtype:#04x}")
    if not 1 <= ndim <= 4:
        raise BlobFormatError(f"ndim {ndim} outside 1..4")
    if pad != 0:
        raise BlobFormatError("reserved header bytes are not zero")
    end = HEADER.size + 4 * ndim
    if len(buf) < end:
        raise BlobFormatError("truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, HEADER.size)
    if 0 in dims:
        raise BlobFormatError(f"zero-length dimension in {dims}")
    return dims, end


def decode_blob(buf: bytes) -> np.ndarray:
    dims, offset = _parse_header(buf)
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    if len(buf) - offset != expected:
        raise BlobFormatError(
            f"payload is {len(buf) - offset} bytes, dims {dims} need {expected}")
    data = np.frombuffer(buf, dtype="<f4", offset=offset).reshape(dims)
    return data.astype(np.float64)


def save_blob(array, path) -> None:
    Path(path).write_bytes(encode_blob(array))


def load_blob(path) -> np.ndarray:
    return decode_blob(Path(path).read_bytes())


def read_dims(path) -> tuple[int, ...]:
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size + 16)
    dims, _ = _parse_header(head)
    return dims
