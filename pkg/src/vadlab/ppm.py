"""Binary PPM (P6, maxval 255) reading and writing for channel-planar images."""

from __future__ import annotations

import os
import re

import numpy as np

from .errors import DataError

_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def encode_ppm(img: np.ndarray) -> bytes:
    """``img`` is ``3 x H x W`` in [0, 1]; values are rounded to 8 bits."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"PPM export needs a 3 x H x W image, got shape {img.shape}")
    _, h, w = img.shape
    pixels = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.transpose(1, 2, 0).tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    m = _HEADER.match(data)
    if not m:
        raise DataError("not a binary PPM (P6) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise DataError(f"only maxval 255 is supported, got {maxval}")
    body = data[m.end():m.end() + w * h * 3]
    if len(body) != w * h * 3:
        raise DataError(f"PPM pixel data truncated: expected {w * h * 3} bytes, got {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return arr.astype(np.float32) / np.float32(255.0)


def write_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def make_test_card(height: int = 32, width: int = 32) -> np.ndarray:
    """An asymmetric RGB card: no rotation or channel swap leaves it unchanged."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float32)
    r = xx / max(width - 1, 1)
    g = yy / max(height - 1, 1)
    b = np.zeros((height, width), dtype=np.float32)
    b[: height // 3, : width // 4] = 1.0
    b[height // 2:, width - width // 5:] = 0.5
    return np.stack([r, g, b]).astype(np.float32)
