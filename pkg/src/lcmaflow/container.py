"""FFT1 tensor container.

Layout of one record::

    b"FFT1" | u32 rank | rank x u64 extents | row-major little-endian f64 payload

Records can be concatenated in a single stream; readers consume them in order.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"FFT1"


class CorruptFileError(ValueError):
    """A container is truncated or does not start with the expected magic bytes."""


def write_tensor(fh: BinaryIO, array) -> None:
    arr = np.asarray(array, dtype="<f8")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CorruptFileError(f"truncated FFT1 record: expected {n} bytes of {what}, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        if len(magic) < 4:
            raise CorruptFileError("truncated FFT1 record: missing magic bytes")
        raise CorruptFileError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "extents"))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, 8 * count, "payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def save_tensors(path, arrays) -> None:
    with open(path, "wb") as fh:
        for a in arrays:
            write_tensor(fh, a)


def load_tensors(path) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        while True:
            pos = fh.tell()
            if not fh.read(1):
                break
            fh.seek(pos)
            out.append(read_tensor(fh))
    return out
