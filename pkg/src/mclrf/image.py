"""RGB observation images and box-filter downscaling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import renderer


@dataclass(frozen=True, eq=False)
class Image:
    """Row-major RGB image with channels in [0, 1]; ``pixels`` is (h, w, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError("pixels must have shape (height, width, 3)")
        if np.any(px < 0) or np.any(px > 1) or not np.all(np.isfinite(px)):
            raise ValueError("pixel channels must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def at(self, px) -> np.ndarray:
        """Colors at continuous pixel coordinates (nearest pixel)."""
        px = np.asarray(px, dtype=np.float64).reshape(-1, 2)
        cols = np.floor(px[:, 0]).astype(int)
        rows = np.floor(px[:, 1]).astype(int)
        return self.pixels[rows, cols]

    def save_ppm(self, path) -> None:
        renderer.write_ppm(path, self.pixels)

    @classmethod
    def load_ppm(cls, path) -> "Image":
        return cls(renderer.read_ppm(path))


def scale_factor(r: float) -> int:
    """Integer block size ``k`` with ``r == 1 / k``."""
    if not 0 < r <= 1:
        raise ValueError("scale must lie in (0, 1]")
    k = round(1.0 / r)
    if abs(1.0 / k - r) > 1e-9:
        raise ValueError(f"scale {r} is not the reciprocal of an integer")
    return k


def downscale(img: Image, r: float) -> Image:
    """Area-average ``img`` over non-overlapping ``1/r`` blocks."""
    k = scale_factor(r)
    if k == 1:
        return img
    h, w = img.height, img.width
    if h % k or w % k:
        raise ValueError(f"image size {w}x{h} is not divisible by {k}")
    blocks = img.pixels.reshape(h // k, k, w // k, k, 3)
    return Image(np.clip(blocks.mean(axis=(1, 3)), 0.0, 1.0))


def add_noise(img: Image, std: float, seed) -> Image:
    if std <= 0:
        return img
    rng = np.random.default_rng(seed)
    return Image(np.clip(img.pixels + rng.normal(0.0, std, img.pixels.shape), 0.0, 1.0))
