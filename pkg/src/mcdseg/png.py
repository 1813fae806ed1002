"""8-bit PNG read/write through Pillow."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError


def to_uint8(arr: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to 0..255 with round-half-to-even, clipping outside values."""
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_gray(path: str | Path, values: np.ndarray) -> None:
    """Write an H x W array of 0..255 integers as 8-bit grayscale."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError(f"grayscale image must be 2-D, got {arr.shape}")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path, format="PNG")


def write_rgb(path: str | Path, values: np.ndarray) -> None:
    """Write a 3 x H x W array of 0..255 integers as 8-bit RGB."""
    arr = np.asarray(values)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"RGB image must be 3 x H x W, got {arr.shape}")
    Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0)).astype(np.uint8), mode="RGB").save(
        path, format="PNG")


def read_png(path: str | Path) -> tuple[np.ndarray, str]:
    """Return (pixels, Pillow mode); RGB comes back as 3 x H x W, grayscale as H x W."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 3:
        arr = arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr), mode
