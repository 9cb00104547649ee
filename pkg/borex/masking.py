# borex/masking.py
"""
Occlusion masks: square/box masks used by the GP search, flipping, applying a
mask to a volume, and the lumpy random masks of the Monte-Carlo explainer.

A mask grid is a boolean (T, H, W) array where True keeps the pixel and False
occludes it.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, List, Tuple

import numpy as np
from skimage.transform import resize

from borex.core import ImageVolume, Shape3
from borex.errors import OutOfBounds, ShapeError


@dataclass(frozen=True)
class MaskSpec:
    center: Tuple[int, int, int]  # (frame n, row y, col x)
    side: int
    span: int = 1

    def __post_init__(self):
        if self.side < 1 or self.span < 1:
            raise ValueError(f"mask side and span must be >= 1, got side={self.side} span={self.span}")


@dataclass(frozen=True)
class Mask:
    grid: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid).astype(bool)
        if grid.ndim == 2:
            grid = grid[None]
        if grid.ndim != 3:
            raise ShapeError(f"mask grid must be (T,H,W), got shape {grid.shape}")
        grid = grid.copy()
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)

    @property
    def shape(self) -> Shape3:
        return self.grid.shape  # type: ignore[return-value]

    def zero_count(self) -> int:
        return int(self.grid.size - np.count_nonzero(self.grid))


@dataclass(frozen=True)
class MaskDistributionParams:
    cell_grid: Tuple[int, int] = (7, 7)
    keep_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        gh, gw = self.cell_grid
        if gh < 1 or gw < 1:
            raise ValueError(f"cell grid must be at least 1x1, got {self.cell_grid}")
        if not 0.0 < self.keep_prob < 1.0:
            raise ValueError(f"keep_prob must lie in (0, 1), got {self.keep_prob}")


def square_bounds(center: int, side: int, size: int) -> Tuple[int, int]:
    """Half-open [lo, hi) of a side-`side` window around `center`, clipped to [0, size).

    Even sides put the extra cell before the center.
    """
    lo = center - side // 2
    hi = center + (side - 1) // 2 + 1
    return max(lo, 0), min(hi, size)


def render(spec: MaskSpec, shape: Shape3) -> Mask:
    t_len, h, w = shape
    n, y, x = spec.center
    if not (0 <= n < t_len and 0 <= y < h and 0 <= x < w):
        raise OutOfBounds(f"mask center {spec.center} outside volume {shape}")
    grid = np.ones(shape, dtype=bool)
    y0, y1 = square_bounds(y, spec.side, h)
    x0, x1 = square_bounds(x, spec.side, w)
    grid[n:min(n + spec.span, t_len), y0:y1, x0:x1] = False
    return Mask(grid)


def flip(m: Mask) -> Mask:
    return Mask(~m.grid)


def apply(image: ImageVolume, m: Mask, fill: float = 0.0) -> ImageVolume:
    if m.shape != image.spatial_shape:
        raise ShapeError(f"mask shape {m.shape} does not match image {image.spatial_shape}")
    out = np.where(m.grid[..., None], image.data, np.float32(fill))
    return ImageVolume(out)


# ------------- Random lumpy masks -------
def _cell_size(params: MaskDistributionParams, shape: Shape3) -> Tuple[int, int]:
    _, h, w = shape
    gh, gw = params.cell_grid
    return math.ceil(h / gh), math.ceil(w / gw)


def sample_rise_mask(params: MaskDistributionParams, shape: Shape3, rng: np.random.Generator) -> Mask:
    """Draw one binary mask: coarse Bernoulli grid, bilinear upsample, random shift, threshold at 0.5."""
    t_len, h, w = shape
    gh, gw = params.cell_grid
    ch, cw = _cell_size(params, shape)
    grid = (rng.random((gh, gw)) < params.keep_prob).astype(np.float64)
    up = resize(grid, (h + ch, w + cw), order=1, mode="reflect", anti_aliasing=False)
    dy = int(rng.integers(0, ch))
    dx = int(rng.integers(0, cw))
    frame = up[dy:dy + h, dx:dx + w] > 0.5
    return Mask(np.broadcast_to(frame, (t_len, h, w)))


def sample_rise_masks(
    params: MaskDistributionParams, shape: Shape3, count: int, rng: np.random.Generator
) -> Iterator[Mask]:
    for _ in range(count):
        yield sample_rise_mask(params, shape, rng)


def enumerate_cell_masks(params: MaskDistributionParams, shape: Shape3) -> List[Tuple[Mask, float]]:
    """Every binary pattern of the cell grid, block-upsampled, with its probability.

    Only practical for tiny grids; used to turn the Monte-Carlo estimators into
    exactly checkable sums.
    """
    t_len, h, w = shape
    gh, gw = params.cell_grid
    ch, cw = _cell_size(params, shape)
    rows = np.arange(h) // ch
    cols = np.arange(w) // cw
    p = params.keep_prob
    out: List[Tuple[Mask, float]] = []
    for bits in itertools.product((False, True), repeat=gh * gw):
        cells = np.array(bits, dtype=bool).reshape(gh, gw)
        frame = cells[rows[:, None], cols[None, :]]
        kept = int(cells.sum())
        weight = (p ** kept) * ((1.0 - p) ** (gh * gw - kept))
        out.append((Mask(np.broadcast_to(frame, (t_len, h, w))), weight))
    return out
