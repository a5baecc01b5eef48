"""Binary PGM (P5) and PPM (P6) reading and writing.

Samples wider than 8 bits are stored big-endian, as the netpbm format requires.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np


def _header(magic: bytes, width: int, height: int, maxval: int) -> bytes:
    return magic + b"\n%d %d\n%d\n" % (width, height, maxval)


def _dtype(maxval: int) -> np.dtype:
    if not 0 < maxval < 65536:
        raise ValueError(f"maxval must be in 1..65535, got {maxval}")
    return np.dtype(">u2") if maxval > 255 else np.dtype("u1")


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Write a 2-D integer array as a binary PGM."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {image.shape}")
    if image.min(initial=0) < 0 or image.max(initial=0) > maxval:
        raise ValueError(f"pixel values outside 0..{maxval}")
    h, w = image.shape
    Path(path).write_bytes(_header(b"P5", w, h, maxval) + image.astype(_dtype(maxval)).tobytes())


def write_ppm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Write an ``[H, W, 3]`` integer array as a binary PPM."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM needs an [H, W, 3] array, got shape {image.shape}")
    if image.min(initial=0) < 0 or image.max(initial=0) > maxval:
        raise ValueError(f"pixel values outside 0..{maxval}")
    h, w, _ = image.shape
    Path(path).write_bytes(_header(b"P6", w, h, maxval) + image.astype(_dtype(maxval)).tobytes())


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    # header tokens are whitespace separated; '#' starts a comment running to end of line
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte precedes the raster


def read_pnm(path) -> tuple[np.ndarray, int]:
    """Read a P5 or P6 file; returns (array, maxval).

    PGM gives ``[H, W]``, PPM gives ``[H, W, 3]``.
    """
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(data, 4)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported netpbm type {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    channels = 3 if magic == b"P6" else 1
    dt = _dtype(maxval)
    count = w * h * channels
    if len(data) - pos < count * dt.itemsize:
        raise ValueError(f"{path}: raster shorter than header declares")
    arr = np.frombuffer(data, dtype=dt, count=count, offset=pos).astype(np.int64)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return arr.reshape(shape), maxval


def read_pgm(path) -> tuple[np.ndarray, int]:
    arr, maxval = read_pnm(path)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a PGM, found a PPM")
    return arr, maxval


def read_ppm(path) -> tuple[np.ndarray, int]:
    arr, maxval = read_pnm(path)
    if arr.ndim != 3:
        raise ValueError(f"{path}: expected a PPM, found a PGM")
    return arr, maxval
