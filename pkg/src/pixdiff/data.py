"""Small datasets for desk-scale experiments.

Every dataset yields arrays of shape ``[N, H, W, C]`` with values in
``[-1, 1]`` plus integer labels (all zero for unlabeled data). One-dimensional
data uses ``H = W = C = 1``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Literal

import numpy as np

from pixdiff.errors import ConfigurationError

DatasetKind = Literal["two_gaussians_1d", "grid_bits_1d", "shapes_16x16", "file_folder"]
KINDS = ("two_gaussians_1d", "grid_bits_1d", "shapes_16x16", "file_folder")
SHAPE_CLASSES = ("square", "circle", "triangle")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm")

GAUSSIAN_MEANS = (-0.5, 0.5)
GAUSSIAN_STD = 0.1


@dataclass(frozen=True)
class ToyDataset:
    kind: DatasetKind = "two_gaussians_1d"
    resolution: int = 1
    num_classes: int = 0
    bits: int = 3
    path: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "shapes_16x16":
            object.__setattr__(self, "resolution", 16)
            object.__setattr__(self, "num_classes", len(SHAPE_CLASSES))
        elif self.kind != "file_folder":
            object.__setattr__(self, "resolution", 1)
        if self.kind == "file_folder" and not self.path:
            raise ConfigurationError("file_folder needs a path")
        if self.bits < 1:
            raise ConfigurationError("bits must be >= 1")

    @property
    def channels(self) -> int:
        return 1 if self.kind in ("two_gaussians_1d", "grid_bits_1d") else 3

    @property
    def shape(self) -> tuple:
        return (self.resolution, self.resolution, self.channels)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """``n`` examples and their labels."""
        if self.kind == "two_gaussians_1d":
            return two_gaussians_1d(n, rng), np.zeros(n, dtype=np.int64)
        if self.kind == "grid_bits_1d":
            return grid_bits_1d(n, rng, self.bits), np.zeros(n, dtype=np.int64)
        if self.kind == "shapes_16x16":
            return shapes_16x16(n, rng)
        images = _folder_cache(self.path, self.resolution)
        idx = rng.integers(0, len(images), n)
        return images[idx], np.zeros(n, dtype=np.int64)


def two_gaussians_1d(n: int, rng: np.random.Generator) -> np.ndarray:
    """Equal mixture of N(-0.5, 0.1^2) and N(0.5, 0.1^2), clipped to [-1, 1]."""
    means = np.asarray(GAUSSIAN_MEANS)[rng.integers(0, 2, n)]
    x = means + GAUSSIAN_STD * rng.standard_normal(n)
    return np.clip(x, -1.0, 1.0).reshape(n, 1, 1, 1)


def grid_bits_1d(n: int, rng: np.random.Generator, bits: int = 3) -> np.ndarray:
    """Uniform on the ``2^bits`` grid ``-1 + 2 i / (2^bits - 1)``."""
    k = 2 ** bits
    return (-1.0 + 2.0 * rng.integers(0, k, n) / (k - 1)).reshape(n, 1, 1, 1)


def _shape_mask(kind: int, res: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res] + 0.5
    if kind == 0:
        return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    if kind == 1:
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r ** 2
    # upright triangle: apex at top, base at the bottom of the bounding box
    top, bottom = cy - r, cy + r
    half = r * (yy - top) / (2 * r)
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half)


def shapes_16x16(n: int, rng: np.random.Generator, res: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Coloured squares, circles and triangles on a dark background; label = shape class."""
    labels = rng.integers(0, len(SHAPE_CLASSES), n)
    out = np.empty((n, res, res, 3))
    for i, kind in enumerate(labels):
        r = rng.uniform(0.2, 0.35) * res
        cx, cy = rng.uniform(r, res - r, 2)
        fg = rng.uniform(0.2, 1.0, 3)
        bg = rng.uniform(-1.0, -0.6, 3)
        mask = _shape_mask(int(kind), res, cx, cy, r)[..., None]
        out[i] = np.where(mask, fg, bg)
    return out, labels.astype(np.int64)


_FOLDERS: dict = {}


def _folder_cache(path: str, res: int) -> np.ndarray:
    key = (os.path.abspath(path), res)
    if key not in _FOLDERS:
        _FOLDERS[key] = load_folder(path, res)
    return _FOLDERS[key]


def load_folder(path: str, res: int) -> np.ndarray:
    """Images under ``path`` (sorted by name), centre-cropped and resized to ``res``."""
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise ConfigurationError("file_folder datasets need Pillow (pip install pixdiff[images])") from exc
    if not os.path.isdir(path):
        raise ConfigurationError(f"dataset folder {path!r} does not exist")
    names = sorted(f for f in os.listdir(path) if f.lower().endswith(IMAGE_SUFFIXES))
    if not names:
        raise ConfigurationError(f"no images found in {path!r}")
    images = []
    for name in names:
        with Image.open(os.path.join(path, name)) as im:
            im = im.convert("RGB")
            s = min(im.size)
            left, top = (im.width - s) // 2, (im.height - s) // 2
            im = im.crop((left, top, left + s, top + s)).resize((res, res), Image.BILINEAR)
            images.append(np.asarray(im, dtype=np.float64) / 127.5 - 1.0)
    return np.stack(images)
