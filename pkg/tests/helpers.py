"""Shared test utilities: natural image crops and small constructions."""

from __future__ import annotations

import numpy as np
import skimage.data as skd

from srfusion.imaging import ColorImage, ImagePlane

# Textured photograph crops used as the evaluation set, and disjoint crops
# used to synthesize dictionary training pairs.
TEST_CROPS = [
    ("camera", 100, 100),
    ("coins", 60, 100),
    ("cat", 80, 120),
    ("coffee", 180, 320),
    ("astronaut", 200, 180),
]
TRAIN_CROPS = [
    ("astronaut", 50, 100),
    ("coffee", 100, 150),
    ("chelsea", 30, 80),
    ("rocket", 80, 150),
]

_CACHE: dict[str, np.ndarray] = {}


def _load(name: str) -> np.ndarray:
    if name not in _CACHE:
        _CACHE[name] = getattr(skd, name)()
    return _CACHE[name]


def natural_gray(name: str) -> np.ndarray:
    """Bundled sample photo as a [0, 1] float grid."""
    img = _load(name)
    if img.ndim == 3:
        img = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    return img.astype(np.float64) / 255.0


def gray_crop(name: str, r0: int, c0: int, size: int) -> ImagePlane:
    return ImagePlane(natural_gray(name)[r0 : r0 + size, c0 : c0 + size])


def color_crop(name: str, r0: int, c0: int, size: int) -> ColorImage:
    img = _load(name)
    arr = img.astype(np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return ColorImage(arr[r0 : r0 + size, c0 : c0 + size])


def periodic_texture(height: int, width: int, period: int = 8) -> np.ndarray:
    """Exactly periodic synthetic texture in [0, 1]."""
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    t = (
        0.5
        + 0.22 * np.sin(2 * np.pi * xx / period)
        + 0.18 * np.cos(2 * np.pi * yy / period)
        + 0.08 * np.sin(2 * np.pi * (xx + yy) / period)
    )
    return np.clip(t, 0.0, 1.0)


def crop_border(plane: ImagePlane, border: int) -> ImagePlane:
    return ImagePlane(plane.data[border:-border, border:-border])
