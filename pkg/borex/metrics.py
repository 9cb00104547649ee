# borex/metrics.py
"""
Saliency-map quality metrics and the paired signed-rank test.

Insertion reveals the top-k cells of a map on a fill-valued canvas and
records the classifier's confidence; deletion hides them; the F-measure
compares the top-k cells with an annotated region. All three use the same
fraction schedule 1/steps, 2/steps, ..., 1 and report the mean over steps.
Ranking ties break in flat (frame, row, col) order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.stats import norm, rankdata

from borex.core import ClassifierPort, ImageVolume, Label, SaliencyVolume, evaluate_checked
from borex.errors import DegenerateSample, EmptyRegion, ShapeError

logger = logging.getLogger(__name__)

EXACT_MAX_N = 25
ALTERNATIVES = ("greater", "less", "two-sided")
METHODS = ("auto", "exact", "normal_approx")


@dataclass(frozen=True)
class CurveResult:
    fractions: Tuple[float, ...]
    values: Tuple[float, ...]

    @property
    def score(self) -> float:
        return float(np.mean(self.values))


@dataclass(frozen=True)
class WilcoxonResult:
    n_effective: int
    statistic: float
    p_value: float
    method: str  # "exact" | "normal_approx"
    alternative: str = "greater"


# ------------- Ranking helpers ----------
def step_counts(total: int, steps: int) -> np.ndarray:
    """Cell counts k_j = round(j * total / steps) for j = 1..steps (half up)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    j = np.arange(1, steps + 1, dtype=np.int64)
    return (2 * j * total + steps) // (2 * steps)


def ranking(smap: SaliencyVolume) -> np.ndarray:
    """Flat cell indices by descending saliency; ties keep flat order."""
    return np.argsort(-smap.values.reshape(-1), kind="stable")


def top_k_mask(smap: SaliencyVolume, k: int) -> np.ndarray:
    flat = np.zeros(smap.values.size, dtype=bool)
    flat[ranking(smap)[:k]] = True
    return flat.reshape(smap.shape)


def _check(image: ImageVolume, smap: SaliencyVolume) -> None:
    if image.spatial_shape != smap.shape:
        raise ShapeError(f"map shape {smap.shape} does not match image {image.spatial_shape}")


def _curve(
    M: ClassifierPort,
    image: ImageVolume,
    label: Label,
    smap: SaliencyVolume,
    steps: int,
    fill: float,
    reveal_top: bool,
    batch: int,
) -> CurveResult:
    _check(image, smap)
    order = ranking(smap)
    counts = step_counts(order.size, steps)
    volumes = []
    for k in counts:
        top = np.zeros(order.size, dtype=bool)
        top[order[:k]] = True
        keep = top if reveal_top else ~top
        volumes.append(ImageVolume(np.where(keep.reshape(smap.shape)[..., None], image.data, np.float32(fill))))
    values: List[float] = []
    for start in range(0, len(volumes), batch):
        values.extend(evaluate_checked(M, volumes[start:start + batch], label).tolist())
    return CurveResult(tuple(float(f) for f in np.arange(1, steps + 1) / steps), tuple(values))


def insertion(
    M: ClassifierPort,
    image: ImageVolume,
    label: Label,
    smap: SaliencyVolume,
    steps: int = 20,
    fill: float = 0.0,
    batch: int = 32,
) -> CurveResult:
    """Higher is better."""
    return _curve(M, image, label, smap, steps, fill, True, batch)


def deletion(
    M: ClassifierPort,
    image: ImageVolume,
    label: Label,
    smap: SaliencyVolume,
    steps: int = 20,
    fill: float = 0.0,
    batch: int = 32,
) -> CurveResult:
    """Lower is better."""
    return _curve(M, image, label, smap, steps, fill, False, batch)


def f_measure(smap: SaliencyVolume, region: np.ndarray, steps: int = 20) -> CurveResult:
    region = np.asarray(region).astype(bool)
    if region.shape != smap.shape:
        raise ShapeError(f"region shape {region.shape} does not match map {smap.shape}")
    truth = region.reshape(-1)
    size = int(truth.sum())
    if size == 0:
        raise EmptyRegion("F-measure needs a region with at least one cell")
    order = ranking(smap)
    hits = np.cumsum(truth[order])
    values = []
    for k in step_counts(order.size, steps):
        tp = int(hits[k - 1]) if k else 0
        precision = tp / k if k else 0.0
        recall = tp / size
        values.append(0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall))
    return CurveResult(tuple(float(f) for f in np.arange(1, steps + 1) / steps), tuple(values))


# ------------- Signed-rank test ---------
def _null_counts(doubled_ranks: Sequence[int]) -> np.ndarray:
    """Number of sign assignments reaching each value of 2W."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(
    pairs: Sequence[Tuple[float, float]], alternative: str = "greater", method: str = "auto"
) -> WilcoxonResult:
    """Signed-rank test of a against b on paired samples.

    "greater" tests whether a is stochastically greater than b. Zero
    differences are dropped; tied |d| share their average rank. The exact
    null distribution is used up to EXACT_MAX_N pairs, otherwise the normal
    approximation with tie correction and a 0.5 continuity correction.
    `method` forces one of the two.
    """
    if alternative not in ALTERNATIVES:
        raise ValueError(f"alternative must be one of {ALTERNATIVES}")
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if not pairs:
        raise DegenerateSample("signed-rank test needs at least one pair")
    d = np.array([float(a) - float(b) for a, b in pairs])
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        raise DegenerateSample("all paired differences are zero")
    ranks = rankdata(np.abs(d), method="average")
    w = float(ranks[d > 0].sum())

    if method == "exact" or (method == "auto" and n <= EXACT_MAX_N):
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _null_counts(doubled.tolist())
        total = counts.sum()
        w2 = int(round(2 * w))
        upper = counts[w2:].sum() / total
        lower = counts[:w2 + 1].sum() / total
        used = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, tie_sizes = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes ** 3 - tie_sizes)) / 48.0
        sd = np.sqrt(var)
        upper = float(norm.sf((w - 0.5 - mean) / sd))
        lower = float(norm.cdf((w + 0.5 - mean) / sd))
        used = "normal_approx"

    if alternative == "greater":
        p = upper
    elif alternative == "less":
        p = lower
    else:
        p = min(1.0, 2.0 * min(upper, lower))
    return WilcoxonResult(n_effective=n, statistic=w, p_value=float(min(max(p, 0.0), 1.0)), method=used,
                          alternative=alternative)


def wilcoxon_one_sided(pairs: Sequence[Tuple[float, float]]) -> WilcoxonResult:
    return wilcoxon_signed_rank(pairs, alternative="greater")


def evaluate_map(
    M: ClassifierPort,
    image: ImageVolume,
    label: Label,
    smap: SaliencyVolume,
    region=None,
    steps: int = 20,
    fill: float = 0.0,
    batch: int = 32,
) -> Dict[str, float]:
    """All three scores for one map; f_measure is NaN without a region."""
    scores = {
        "insertion": insertion(M, image, label, smap, steps, fill, batch).score,
        "deletion": deletion(M, image, label, smap, steps, fill, batch).score,
        "f_measure": float("nan"),
    }
    if region is not None:
        scores["f_measure"] = f_measure(smap, region, steps).score
    return scores
