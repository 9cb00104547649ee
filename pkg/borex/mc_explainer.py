# borex/mc_explainer.py
"""
Monte-Carlo saliency estimators over random occlusion masks.

    RISE     S(l)  ~ 1/N sum_n  m_n(l) / p              * M(i . m_n)
    PN-RISE  S(l)  ~ 1/N sum_n (m_n(l) - p) / (p(1-p))  * M(i . m_n)

p is the design keep-probability of the mask distribution. With
`exhaustive=True` the random sample is replaced by every cell pattern,
weighted by its probability, which makes both sums exact expectations.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple

import numpy as np

from borex.core import ClassifierPort, ImageVolume, Label, SaliencyVolume, evaluate_checked
from borex.masking import Mask, MaskDistributionParams, apply, enumerate_cell_masks, sample_rise_masks

logger = logging.getLogger(__name__)

RISE = "rise"
PN_RISE = "pn_rise"
VARIANTS = (RISE, PN_RISE)


@dataclass(frozen=True)
class McConfig:
    n_masks: int = 100
    dist: MaskDistributionParams = field(default_factory=MaskDistributionParams)
    variant: str = RISE
    batch: int = 32
    exhaustive: bool = False
    fill: float = 0.0

    def __post_init__(self):
        if self.n_masks < 1 or self.batch < 1:
            raise ValueError("n_masks and batch must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown Monte-Carlo variant {self.variant!r}; expected one of {VARIANTS}")


def _weighted_masks(
    cfg: McConfig, shape, rng: Optional[np.random.Generator]
) -> Iterable[Tuple[Mask, float]]:
    if cfg.exhaustive:
        return enumerate_cell_masks(cfg.dist, shape)
    rng = rng if rng is not None else np.random.default_rng(cfg.dist.seed)
    w = 1.0 / cfg.n_masks
    return ((m, w) for m in sample_rise_masks(cfg.dist, shape, cfg.n_masks, rng))


def _accumulate(
    M: ClassifierPort,
    image: ImageVolume,
    label: Label,
    cfg: McConfig,
    rng: Optional[np.random.Generator],
) -> Tuple[np.ndarray, np.ndarray]:
    """Return (sum_n w_n M_n m_n, sum_n w_n M_n) over the mask set."""
    shape = image.spatial_shape
    kept_sum = np.zeros(shape, dtype=np.float64)
    score_sum = 0.0
    chunk: List[Tuple[Mask, float]] = []
    index = 0

    def flush():
        nonlocal score_sum, kept_sum
        volumes = [apply(image, m, cfg.fill) for m, _ in chunk]
        scores = evaluate_checked(M, volumes, label, first_index=index)
        weights = np.array([w for _, w in chunk]) * scores
        stack = np.stack([m.grid for m, _ in chunk]).astype(np.float64)
        kept_sum += np.tensordot(weights, stack, axes=1)
        score_sum += float(weights.sum())

    for mask, weight in _weighted_masks(cfg, shape, rng):
        chunk.append((mask, weight))
        if len(chunk) == cfg.batch:
            flush()
            index += len(chunk)
            chunk = []
    if chunk:
        flush()
    return kept_sum, np.float64(score_sum)


def estimate_rise(
    M: ClassifierPort,
    image: ImageVolume,
    label: Label,
    cfg: McConfig,
    rng: Optional[np.random.Generator] = None,
) -> SaliencyVolume:
    kept_sum, _ = _accumulate(M, image, label, cfg, rng)
    return SaliencyVolume(kept_sum / cfg.dist.keep_prob)


def estimate_pn_rise(
    M: ClassifierPort,
    image: ImageVolume,
    label: Label,
    cfg: McConfig,
    rng: Optional[np.random.Generator] = None,
) -> SaliencyVolume:
    p = cfg.dist.keep_prob
    kept_sum, score_sum = _accumulate(M, image, label, cfg, rng)
    # sum w M (m - p) = kept_sum - p * score_sum
    return SaliencyVolume((kept_sum - p * score_sum) / (p * (1.0 - p)))


def estimate(
    M: ClassifierPort,
    image: ImageVolume,
    label: Label,
    cfg: McConfig,
    rng: Optional[np.random.Generator] = None,
) -> SaliencyVolume:
    """Dispatch on cfg.variant."""
    logger.debug("Monte-Carlo %s with %s masks", cfg.variant, "all" if cfg.exhaustive else cfg.n_masks)
    if cfg.variant == PN_RISE:
        return estimate_pn_rise(M, image, label, cfg, rng)
    return estimate_rise(M, image, label, cfg, rng)
