"""Minimal binary netpbm codec: P6 color images and P5 grayscale rasters.

The only raster formats the pipeline reads or writes. Maxval is fixed at
255; pixel payloads are raw bytes. Color images cross this boundary as
channel-planar float arrays (3, H, W) scaled to [0, 1].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class DecodeError(ValueError):
    """Malformed or truncated netpbm payload; message carries a byte offset."""


def _read_header(blob: bytes, magic: bytes, path) -> tuple[int, int, int]:
    """Parse ``<magic> <w> <h> <maxval>`` allowing comments and any whitespace."""
    if blob[:2] != magic:
        raise DecodeError(f"{path}: bad magic {blob[:2]!r} at byte 0, expected {magic!r}")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            nl = blob.find(b"\n", pos)
            if nl < 0:
                raise DecodeError(f"{path}: unterminated comment at byte {pos}")
            pos = nl + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        token = blob[start:pos]
        if not token.isdigit():
            raise DecodeError(f"{path}: expected integer at byte {start}, got {token!r}")
        fields.append(int(token))
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise DecodeError(f"{path}: missing whitespace after header at byte {pos}")
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise DecodeError(f"{path}: unsupported maxval {maxval}, only 255")
    if w < 1 or h < 1:
        raise DecodeError(f"{path}: non-positive image dimensions {w}x{h}")
    return w, h, pos


def read_ppm(path) -> np.ndarray:
    """Decode a binary P6 file into a (3, H, W) float64 array in [0, 1]."""
    blob = Path(path).read_bytes()
    w, h, pos = _read_header(blob, b"P6", path)
    need = 3 * w * h
    got = len(blob) - pos
    if got < need:
        raise DecodeError(
            f"{path}: truncated pixel data at byte {len(blob)}: expected {need} payload bytes, got {got}")
    raw = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    pixels = raw.reshape(h, w, 3).transpose(2, 0, 1)
    return pixels.astype(np.float64) / 255.0


def write_ppm(path, image: np.ndarray) -> None:
    """Encode a (3, H, W) float array in [0, 1] as binary P6."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim != 3 or a.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got shape {a.shape}")
    u8 = np.rint(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = a.shape[1], a.shape[2]
    payload = u8.transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(b"P6 %d %d 255\n" % (w, h) + payload)


def read_pgm(path) -> np.ndarray:
    """Decode a binary P5 file into an (H, W) uint8 array."""
    blob = Path(path).read_bytes()
    w, h, pos = _read_header(blob, b"P5", path)
    need = w * h
    got = len(blob) - pos
    if got < need:
        raise DecodeError(
            f"{path}: truncated pixel data at byte {len(blob)}: expected {need} payload bytes, got {got}")
    return np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos).reshape(h, w).copy()


def write_pgm(path, gray: np.ndarray) -> None:
    """Encode an (H, W) uint8 array as binary P5."""
    a = np.asarray(gray)
    if a.ndim != 2:
        raise ValueError(f"expected (H, W) grayscale raster, got shape {a.shape}")
    if a.dtype != np.uint8:
        raise ValueError(f"expected uint8 raster, got {a.dtype}")
    h, w = a.shape
    Path(path).write_bytes(b"P5 %d %d 255\n" % (w, h) + a.tobytes())
