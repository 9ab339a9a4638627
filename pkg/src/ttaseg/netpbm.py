"""Binary PGM (P5) and PPM (P6) readers/writers, 8-bit, maxval 255 only.

Intensities map to bytes via round-half-up of v*255 and back via v/255,
so writing a freshly read canonical file reproduces it byte for byte.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np


def _read_token(stream: io.BufferedReader) -> bytes:
    """Next whitespace-delimited header token, skipping '#' comments."""
    tok = b""
    while True:
        ch = stream.read(1)
        if not ch:
            raise ValueError("netpbm: truncated header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = stream.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_pnm(path) -> np.ndarray:
    """Read a P5/P6 file into float64 in [0, 1]: (H, W) gray or (3, H, W) color."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"netpbm: bad magic {magic!r} in {path}")
        width = int(_read_token(f))
        height = int(_read_token(f))
        maxval = int(_read_token(f))
        if maxval != 255:
            raise ValueError(f"netpbm: only maxval 255 supported, got {maxval} in {path}")
        channels = 1 if magic == b"P5" else 3
        payload = f.read(width * height * channels)
        if len(payload) != width * height * channels:
            raise ValueError(f"netpbm: truncated payload in {path}")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 1:
        return arr.reshape(height, width)
    return arr.reshape(height, width, 3).transpose(2, 0, 1)


def _encode(values: np.ndarray) -> np.ndarray:
    # round half up, e.g. 0.5 -> 128
    return np.clip(np.floor(values * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray):
    """Write a gray image; floats in [0, 1] or booleans (mask as 0/255)."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"write_pgm: expected HxW, got shape {image.shape}")
    data = (image.astype(np.uint8) * 255) if image.dtype == bool else _encode(image.astype(np.float64))
    h, w = image.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def write_ppm(path, image: np.ndarray):
    """Write a color image given as (3, H, W) floats in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"write_ppm: expected 3xHxW, got shape {image.shape}")
    data = _encode(image.transpose(1, 2, 0))
    h, w = image.shape[1:]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + data.tobytes())


def write_image(path, image: np.ndarray):
    if np.asarray(image).ndim == 2:
        write_pgm(path, image)
    else:
        write_ppm(path, image)
