"""Netpbm image files (binary PGM/PPM, maxval 255)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["to_uint8", "write_pgm", "read_pgm", "write_ppm", "read_ppm"]


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Map reals in [0, 1] to 0..255 with round-half-up, clipping outside values."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _write(path, magic: bytes, pixels: np.ndarray) -> None:
    h, w = pixels.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    Path(path).write_bytes(header + np.ascontiguousarray(pixels).tobytes())


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, found {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    pos += 1
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * channels, offset=pos)
    return raw.reshape((h, w, channels) if channels > 1 else (h, w))


def write_pgm(path, image: np.ndarray) -> None:
    """Write a ``[H, W]`` or ``[1, H, W]`` image with values in [0, 1]."""
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[0]
    _write(path, b"P5", to_uint8(img))


def read_pgm(path) -> np.ndarray:
    """Read a P5 file into a ``[1, H, W]`` float64 array in [0, 1]."""
    return (_read(path, b"P5", 1).astype(np.float64) / 255.0)[None]


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write a ``[3, H, W]`` float image with values in [0, 1]."""
    _write(path, b"P6", to_uint8(np.asarray(rgb).transpose(1, 2, 0)))


def read_ppm(path) -> np.ndarray:
    return _read(path, b"P6", 3).astype(np.float64).transpose(2, 0, 1) / 255.0
