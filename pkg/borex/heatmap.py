# borex/heatmap.py
"""
Red/blue saliency overlays: positive saliency in red, negative in blue,
drawn over the grayscale image with alpha 0.5. One PNG per frame.
"""
from __future__ import annotations

import logging
import os
from typing import List

import matplotlib
import matplotlib.image as mpimg
import numpy as np

from borex.core import ImageVolume, SaliencyVolume
from borex.errors import ShapeError

logger = logging.getLogger(__name__)

CMAP_NAME = "bwr"
ALPHA = 0.5


def overlay_frames(smap: SaliencyVolume, base: ImageVolume, alpha: float = ALPHA) -> np.ndarray:
    """(T, H, W, 3) RGB overlays in [0, 1]; the colormap is centered at 0."""
    if smap.shape != base.spatial_shape:
        raise ShapeError(f"map shape {smap.shape} does not match image {base.spatial_shape}")
    peak = float(np.max(np.abs(smap.values)))
    scaled = smap.values / peak if peak > 0 else np.zeros(smap.shape)
    colors = matplotlib.colormaps[CMAP_NAME]((scaled + 1.0) / 2.0)[..., :3]
    gray = np.repeat(base.data.astype(np.float64).mean(axis=-1, keepdims=True), 3, axis=-1)
    return np.clip((1.0 - alpha) * gray + alpha * colors, 0.0, 1.0)


def emit_heatmap(smap: SaliencyVolume, base: ImageVolume, directory: str, stem: str) -> List[str]:
    """Write `<stem>_<frame>.png` for every frame and return the paths."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for n, frame in enumerate(overlay_frames(smap, base)):
        path = os.path.join(directory, f"{stem}_{n}.png")
        mpimg.imsave(path, frame, format="png")
        paths.append(path)
    logger.debug("Wrote %d heatmap frame(s) for %s", len(paths), stem)
    return paths
