"""NTF: the bit-exact tensor file format.

Layout: magic b"NTF1" | rank u8 | 3 reserved zero bytes |
shape rank x u64 LE | payload f64 LE row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, RankOutOfRangeError, TruncatedFileError
from .tensorops import MAX_RANK, as_tensor

MAGIC = b"NTF1"


def tensor_to_bytes(t) -> bytes:
    t = as_tensor(t)
    rank = t.ndim
    header = MAGIC + struct.pack("<B3x", rank)
    header += struct.pack(f"<{rank}Q", *t.shape)
    return header + t.tobytes(order="C")


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise TruncatedFileError(f"only {len(data)} bytes, header needs 8")
    if data[:4] != MAGIC:
        raise BadMagicError(f"expected {MAGIC!r}, got {data[:4]!r}")
    rank = data[4]
    if rank < 1 or rank > MAX_RANK:
        raise RankOutOfRangeError(f"rank {rank} outside 1..{MAX_RANK}")
    shape_end = 8 + 8 * rank
    if len(data) < shape_end:
        raise TruncatedFileError("file ends inside the shape block")
    shape = struct.unpack(f"<{rank}Q", data[8:shape_end])
    count = 1
    for extent in shape:
        count *= extent
    expected = shape_end + 8 * count
    if len(data) != expected:
        raise TruncatedFileError(f"payload is {len(data) - shape_end} bytes, expected {8 * count}")
    payload = np.frombuffer(data[shape_end:], dtype="<f8").reshape(shape)
    return as_tensor(payload.copy())


def write_ntf(t, path) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def read_ntf(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
