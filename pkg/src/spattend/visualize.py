"""Attention heatmaps: upsample a K x K grid to the input size, blur, overlay.

The grid is stretched to the input size by nearest-neighbour lookup (pixel
``y`` belongs to cell ``floor(y * K / S)``), so the upsampling factor is
``S / K``, the stream's total downsampling.  It is then blurred with a
normalized Gaussian of sigma = factor / 2 truncated at 3 sigma, and min-max
scaled to [0, 1].
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve1d

from . import pnm
from .errors import DimensionError

DEGENERATE_LEVEL = 0.5


def gaussian_kernel(sigma, radius=None):
    """1-D Gaussian taps summing to one; ``radius`` defaults to ``ceil(3 * sigma)``."""
    if sigma <= 0:
        return np.ones(1)
    radius = int(math.ceil(3.0 * sigma)) if radius is None else int(radius)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def upsample_nearest(grid, size):
    """``(K, K)`` -> ``(size, size)``, each pixel taking its cell's value."""
    grid = np.asarray(grid, dtype=np.float64)
    K = grid.shape[0]
    if grid.ndim != 2 or grid.shape[1] != K:
        raise DimensionError(f"attention grid must be square, got {grid.shape}")
    idx = (np.arange(size) * K) // size
    return grid[np.ix_(idx, idx)]


def cell_bounds(u, v, grid, size):
    """Pixel ranges ``(y0, y1, x0, x1)`` (end-exclusive) of cell ``(u, v)`` after upsampling."""
    idx = (np.arange(size) * grid) // size
    rows = np.flatnonzero(idx == u)
    cols = np.flatnonzero(idx == v)
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def minmax(x):
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi - lo <= 0.0:
        return np.full(x.shape, DEGENERATE_LEVEL)
    return (x - lo) / (hi - lo)


def render_heatmap(grid, size):
    grid = np.asarray(grid, dtype=np.float64)
    factor = size / grid.shape[0]
    up = upsample_nearest(grid, size)
    k = gaussian_kernel(factor / 2.0)
    blurred = convolve1d(convolve1d(up, k, axis=0, mode="nearest"), k, axis=1, mode="nearest")
    return minmax(blurred)


def hot(heat):
    """Black -> red -> yellow -> white colour ramp, ``(H, W) -> (H, W, 3)``."""
    h = np.asarray(heat)[..., None]
    return np.clip(3.0 * h - np.array([0.0, 1.0, 2.0]), 0.0, 1.0)


def overlay(image, heat, alpha=0.5):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape[:2] != heat.shape:
        raise DimensionError(f"image {image.shape[:2]} and heatmap {heat.shape} differ in size")
    rgb = np.repeat(image, 3, axis=2) if image.shape[2] == 1 else image
    return (1.0 - alpha) * rgb + alpha * hot(heat)


@dataclass
class HeatmapArtifact:
    image: np.ndarray
    grid: np.ndarray
    heatmap: np.ndarray
    overlay: np.ndarray
    paths: list = field(default_factory=list)

    def argmax_pixel(self):
        return np.unravel_index(int(np.argmax(self.heatmap)), self.heatmap.shape)

    def argmax_cell(self):
        return np.unravel_index(int(np.argmax(self.grid)), self.grid.shape)


def make_artifact(image, grid, expected_grid=None):
    image = np.asarray(image, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape[0] != image.shape[1]:
        raise DimensionError(f"input image must be square, got {image.shape[:2]}")
    if expected_grid is not None and grid.shape != (expected_grid, expected_grid):
        raise DimensionError(f"attention grid {grid.shape} does not match K={expected_grid}")
    heat = render_heatmap(grid, image.shape[0])
    return HeatmapArtifact(image, grid, heat, overlay(image, heat))


def write_artifact(art, out_dir, stem="attention"):
    os.makedirs(out_dir, exist_ok=True)
    heat_path = os.path.join(out_dir, f"{stem}_heatmap.pgm")
    over_path = os.path.join(out_dir, f"{stem}_overlay.ppm")
    pnm.write(heat_path, art.heatmap)
    pnm.write(over_path, art.overlay)
    art.paths = [heat_path, over_path]
    return art


def attention_grids(model, image, aggregate="mean"):
    """Attention grids for one image: ``[M]`` for ``"mean"``, one per sweep step for ``"step"``."""
    from .objective import aggregate_attention

    if model.config.mode != "attention":
        raise DimensionError("the baseline model has no attention maps")
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape != model.config.input_shape:
        raise DimensionError(f"image shape {image.shape} != model input {model.config.input_shape}")
    K = model.grid
    out = model.forward(image[None])
    if aggregate == "mean":
        return [aggregate_attention(out.maps).data[0].reshape(K, K)]
    if aggregate == "step":
        return [m.data[0].reshape(K, K) for m in out.maps]
    raise ValueError(f"aggregate must be 'mean' or 'step', got {aggregate!r}")
