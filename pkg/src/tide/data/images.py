"""Planar float images: decode, encode, crop and bilinear resize."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image

from tide.errors import DimError


def load_image(path) -> np.ndarray:
    """Read a PNG/PPM/JPEG file into a [3, H, W] float64 array in [0, 1]."""
    with Image.open(Path(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path, image: np.ndarray) -> None:
    """Write a [3, H, W] or [H, W] array in [0, 1]; PGM/PPM/PNG chosen by suffix."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(Path(path))


def _axis_weights(n_in: int, n_out: int):
    # sample positions of output cell centers, expressed in input pixel units
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    lo = np.minimum(np.floor(pos), max(n_in - 2, 0)).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Separable bilinear resize of a [C, H, W] array (half-pixel centers).

    Resizing to the input's own size returns the input values exactly.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[1] < 1 or image.shape[2] < 1 or height < 1 or width < 1:
        raise DimError(f"cannot resize {image.shape} to {height}x{width}")
    _, h, w = image.shape
    y0, y1, fy = _axis_weights(h, height)
    x0, x1, fx = _axis_weights(w, width)
    rows = image[:, y0, :] * (1 - fy)[None, :, None] + image[:, y1, :] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


def crop(image: np.ndarray, box) -> np.ndarray:
    """Crop the pixels covered by a corner box (x1, y1, x2, y2); at least 1x1."""
    _, h, w = image.shape
    x1, y1, x2, y2 = box
    c0 = min(max(int(math.floor(x1)), 0), w - 1)
    r0 = min(max(int(math.floor(y1)), 0), h - 1)
    c1 = max(min(int(math.ceil(x2)), w), c0 + 1)
    r1 = max(min(int(math.ceil(y2)), h), r0 + 1)
    return image[:, r0:r1, c0:c1]
