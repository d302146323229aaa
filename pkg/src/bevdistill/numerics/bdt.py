"""BDT1 binary tensor dump.

Layout (little-endian): ``b"BDT1"``, u32 rank, ``rank`` x u32 dims, then the
float64 payload in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

MAGIC = b"BDT1"
PathLike = Union[str, Path]


class BDTFormatError(ValueError):
    pass


def to_bytes(arr) -> bytes:
    a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes(order="C")


def from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise BDTFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    off = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    expected = off + 8 * count
    if len(buf) != expected:
        raise BDTFormatError(f"payload size {len(buf) - off} does not match dims {dims}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=off)
    return data.reshape(dims).astype(np.float64)


def save(path: PathLike, arr) -> None:
    Path(path).write_bytes(to_bytes(arr))


def load(path: PathLike) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())


def write(stream: BinaryIO, arr) -> None:
    stream.write(to_bytes(arr))
