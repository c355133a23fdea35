"""GTEN: a bit-exact binary container for one f64 tensor.

Layout: magic ``GTEN``, u8 version (=1), u8 rank, rank little-endian u32
dims, then prod(dims) little-endian f64 values, row-major. Used for
checkpoints and test fixtures.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from divegest.tensor import MAX_RANK, ShapeError

MAGIC = b"GTEN"
VERSION = 1


class GtenError(ValueError):
    """Malformed or truncated GTEN payload."""


def dump_bytes(array: np.ndarray) -> bytes:
    a = np.asarray(array, dtype=np.float64, order="C")  # keeps rank-0 arrays rank 0
    if a.ndim > MAX_RANK:
        raise ShapeError(f"GTEN stores tensors of rank <= {MAX_RANK}, got rank {a.ndim}")
    header = MAGIC + struct.pack("<BB", VERSION, a.ndim)
    dims = struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b""
    return header + dims + a.astype("<f8").tobytes(order="C")


def parse_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise GtenError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 6:
        raise GtenError(f"truncated header: {len(blob)} bytes")
    version, rank = struct.unpack_from("<BB", blob, 4)
    if version != VERSION:
        raise GtenError(f"unsupported version {version}")
    if rank > MAX_RANK:
        raise GtenError(f"rank {rank} exceeds maximum {MAX_RANK}")
    offset = 6
    if len(blob) < offset + 4 * rank:
        raise GtenError(f"truncated dims at byte {len(blob)}")
    dims = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
    offset += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    need = offset + 8 * count
    if len(blob) != need:
        raise GtenError(f"payload length {len(blob)} != expected {need} bytes")
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    return data.astype(np.float64).reshape(dims)


def save(path, array: np.ndarray) -> None:
    Path(path).write_bytes(dump_bytes(array))


def load(path) -> np.ndarray:
    return parse_bytes(Path(path).read_bytes())
