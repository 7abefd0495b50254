"""8-bit PNG persistence and range conversion.

On disk images are 8-bit PNGs; in memory they are float64 arrays of shape
``(H, W, C)`` either in ``[0, 1]`` ("unit") or ``[-1, 1]`` ("signed", the
range the diffusion code works in).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def unit_to_signed(a):
    return 2.0 * np.asarray(a, dtype=np.float64) - 1.0


def signed_to_unit(a):
    return (np.asarray(a, dtype=np.float64) + 1.0) / 2.0


def quantize(unit: np.ndarray) -> np.ndarray:
    return np.round(np.clip(unit, 0.0, 1.0) * 255.0).astype(np.uint8)


def read_image(path, signed: bool = True) -> np.ndarray:
    """Load an image as ``(H, W, C)`` floats; grayscale stays single-channel."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    v = arr.astype(np.float64) / 255.0
    return unit_to_signed(v) if signed else v


def write_image(path, img: np.ndarray, signed: bool = True) -> None:
    unit = signed_to_unit(img) if signed else np.asarray(img, dtype=np.float64)
    q = quantize(unit)
    if q.ndim == 3 and q.shape[2] == 1:
        q = q[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path, format="PNG", optimize=False)


def list_images(directory) -> list[str]:
    d = Path(directory)
    return sorted(p.name for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
