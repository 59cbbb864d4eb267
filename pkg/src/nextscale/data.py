"""Synthetic class-conditional image families with analytic statistics.

Three families, all rendered in [0, 1] on a unit square with pixel
centers at (col + 0.5)/side:

  blobs    isotropic Gaussian bump; the class fixes the center range box
           and the bump width.
  rings    radial Gaussian shell around the image center; the class
           fixes the radius range and shell width.
  stripes  raised cosine grating; the class fixes frequency and angle,
           the phase is uniform over one period, so every pixel has mean
           exactly 0.5.

Each item derives its own random stream from (seed, item index), so a
dataset is byte-for-byte reproducible and any prefix of it is stable
under changes to the total size. Labels cycle through the classes, item
i belongs to class i mod classes. The per-pixel mean of blobs and rings
under their parameter distribution has a closed erf form used by tests;
see ``blob_mean_image`` and ``ring_mean_image``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError
from .rng import numpy_stream

FAMILIES = ("blobs", "rings", "stripes")


def default_class_params(family: str, classes: int) -> tuple[tuple[float, ...], ...]:
    """Deterministic per-class parameter tuples.

    blobs: (cx_lo, cx_hi, cy_lo, cy_hi, sigma); classes tile a 2-column
    grid of center boxes with mildly varying widths. rings: (r_lo, r_hi,
    shell_width). stripes: (frequency, angle).
    """
    if family == "blobs":
        params = []
        for c in range(classes):
            # quadrant center boxes; classes beyond 4 revisit boxes with a new width
            row, col = divmod(c % 4, 2)
            x0 = 0.15 + 0.5 * col
            y0 = 0.15 + 0.5 * row
            sigma = 0.10 + 0.02 * (c % 3)
            params.append((x0, x0 + 0.2, y0, y0 + 0.2, sigma))
        return tuple(params)
    if family == "rings":
        return tuple(
            (0.12 + 0.22 * c / max(classes - 1, 1), 0.18 + 0.22 * c / max(classes - 1, 1), 0.05)
            for c in range(classes)
        )
    if family == "stripes":
        return tuple(
            (1.5 + c // 2, math.pi / 2 * (c % 2) / 1.0 + math.pi / 12 * (c // 2))
            for c in range(classes)
        )
    raise ConfigurationError(f"unknown family {family!r}")


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    family: str = "blobs"
    side: int = 16
    channels: int = 1
    classes: int = 4
    size: int = 2048
    seed: int = 0
    class_params: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}, expected one of {FAMILIES}")
        if self.side < 1 or self.channels < 1 or self.classes < 1 or self.size < 1:
            raise ConfigurationError("side, channels, classes and size must be >= 1")
        if not self.class_params:
            object.__setattr__(self, "class_params", default_class_params(self.family, self.classes))
        if len(self.class_params) != self.classes:
            raise ConfigurationError(
                f"{len(self.class_params)} parameter tuples for {self.classes} classes"
            )


@dataclass
class Dataset:
    spec: SyntheticDatasetSpec
    images: torch.Tensor  # [n, H, W, C] float32 in [0, 1]
    labels: torch.Tensor  # [n] int64


def _pixel_grid(side: int) -> tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(side) + 0.5) / side
    return np.meshgrid(coords, coords, indexing="xy")  # (x over cols, y over rows)


def render_item(spec: SyntheticDatasetSpec, index: int) -> tuple[np.ndarray, int]:
    """Render one image and its label from the item's own stream."""
    label = index % spec.classes
    params = spec.class_params[label]
    rng = numpy_stream(spec.seed, f"item/{index}")
    xs, ys = _pixel_grid(spec.side)
    if spec.family == "blobs":
        x0, x1, y0, y1, sigma = params
        cx = rng.uniform(x0, x1)
        cy = rng.uniform(y0, y1)
        img = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma * sigma))
    elif spec.family == "rings":
        r0, r1, width = params
        radius = rng.uniform(r0, r1)
        r = np.sqrt((xs - 0.5) ** 2 + (ys - 0.5) ** 2)
        img = np.exp(-((r - radius) ** 2) / (2.0 * width * width))
    else:  # stripes
        freq, angle = params
        phase = rng.uniform(0.0, 1.0)
        t = freq * (xs * math.cos(angle) + ys * math.sin(angle)) + phase
        img = 0.5 * (1.0 + np.cos(2.0 * math.pi * t))
    stacked = np.repeat(img[:, :, None], spec.channels, axis=2)
    return stacked.astype(np.float32), label


def make_dataset(spec: SyntheticDatasetSpec) -> Dataset:
    images = np.empty((spec.size, spec.side, spec.side, spec.channels), dtype=np.float32)
    labels = np.empty(spec.size, dtype=np.int64)
    for i in range(spec.size):
        images[i], labels[i] = render_item(spec, i)
    return Dataset(spec=spec, images=torch.from_numpy(images), labels=torch.from_numpy(labels))


# ---------------------------------------------------------------------------
# closed-form per-pixel means (oracles for the renderers)


def _uniform_gauss_mean(t: np.ndarray, lo: float, hi: float, sigma: float) -> np.ndarray:
    """E_c~U[lo,hi] exp(-(t - c)^2 / (2 sigma^2)) in closed erf form."""
    if hi == lo:
        return np.exp(-((t - lo) ** 2) / (2.0 * sigma * sigma))
    s = sigma * math.sqrt(2.0)
    upper = torch.erf(torch.from_numpy((hi - t) / s)).numpy()
    lower = torch.erf(torch.from_numpy((lo - t) / s)).numpy()
    return sigma * math.sqrt(2.0 * math.pi) / (2.0 * (hi - lo)) * (upper - lower)


def blob_mean_image(spec: SyntheticDatasetSpec, label: int) -> np.ndarray:
    x0, x1, y0, y1, sigma = spec.class_params[label]
    xs, ys = _pixel_grid(spec.side)
    return _uniform_gauss_mean(xs, x0, x1, sigma) * _uniform_gauss_mean(ys, y0, y1, sigma)


def ring_mean_image(spec: SyntheticDatasetSpec, label: int) -> np.ndarray:
    r0, r1, width = spec.class_params[label]
    xs, ys = _pixel_grid(spec.side)
    r = np.sqrt((xs - 0.5) ** 2 + (ys - 0.5) ** 2)
    return _uniform_gauss_mean(r, r0, r1, width)
