"""RT1 tensor files and 8-bit binary PGM images.

RT1 layout::

    RT1\\n
    <rank>\\n
    <d0> <d1> ... <dk>\\n
    <prod(shape) little-endian float64 values, row-major>
"""
from __future__ import annotations

import io
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import DataError

RT1_MAGIC = b"RT1\n"


def rt1_bytes(x: np.ndarray) -> bytes:
    x = np.ascontiguousarray(x, dtype="<f8")
    header = RT1_MAGIC + f"{x.ndim}\n".encode() + (" ".join(str(d) for d in x.shape) + "\n").encode()
    return header + x.tobytes(order="C")


def write_rt1(path, x: np.ndarray) -> None:
    Path(path).write_bytes(rt1_bytes(x))


def read_rt1_stream(fh: BinaryIO, source: str = "<stream>") -> np.ndarray:
    magic = fh.read(4)
    if magic != RT1_MAGIC:
        raise DataError(f"{source}: not an RT1 tensor (magic {magic!r})")
    try:
        rank = int(fh.readline().decode("ascii"))
        shape_line = fh.readline().decode("ascii").split()
        shape = tuple(int(s) for s in shape_line)
    except (UnicodeDecodeError, ValueError) as exc:
        raise DataError(f"{source}: malformed RT1 header") from exc
    if len(shape) != rank or any(d < 1 for d in shape):
        raise DataError(f"{source}: RT1 rank {rank} does not match shape {shape}")
    count = int(np.prod(shape)) if shape else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise DataError(f"{source}: RT1 payload truncated ({len(payload)} of {8 * count} bytes)")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def read_rt1(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read tensor file {path}: {exc.strerror}") from exc
    return read_rt1_stream(io.BytesIO(data), str(path))


def to_gray8(x: np.ndarray) -> np.ndarray:
    """Min-max normalise a 2-D map to uint8; a constant map becomes all zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        return np.zeros(x.shape, dtype=np.uint8)
    return np.rint((x - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """Write a 2-D uint8 array as binary PGM (P5)."""
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"PGM needs a 2-D uint8 array, got {img.dtype} {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def write_mask_pgm(path, mask: np.ndarray) -> None:
    write_pgm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc.strerror}") from exc
    tokens = []
    pos = 0
    # header: magic, width, height, maxval, each whitespace separated; comments start with '#'
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise DataError(f"{path}: 16-bit PGM is not supported")
    pixels = data[pos : pos + w * h]
    if len(pixels) != w * h:
        raise DataError(f"{path}: PGM pixel data truncated")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


def read_mask_pgm(path) -> np.ndarray:
    return (read_pgm(path) > 127).astype(np.uint8)
