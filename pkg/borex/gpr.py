# borex/gpr.py
"""
Gaussian-process search over occlusion masks.

The GP lives on index points (frame n, row y, col x, side r, span t): the
saliency observed with a mask of side r and span t centered at (n, y, x).
Each iteration picks the candidate maximizing |mu| + kappa * sigma, renders
the box mask there, observes a confidence difference and conditions the GP
on it. The final map averages the posterior mean over sizes and spans,
optionally weighted by the reciprocal of the mask's area (or volume).

Most boxes miss the object, and a flipped-mask observation of such a box is
M(blank) - M(image), far from zero. The loop therefore re-centers the GP on
a low quantile of the observations so far (`offset_quantile`); |mu| then
measures distance from that background level instead of from zero.

With use_flip, use_prior and weighted_avg all off the loop is the plain
GP-based saliency generator; with all three on it is the refinement of a
given prior map.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import interp1d
from scipy.linalg import cho_solve, solve_triangular
from scipy.spatial.distance import cdist

from borex.core import (
    ClassifierPort,
    ImageVolume,
    Label,
    SaliencyVolume,
    Shape3,
    evaluate_checked,
    normalize_saliency,
)
from borex.errors import ConfigError, NumericalError, OutOfBounds, ShapeError
from borex.masking import MaskSpec, apply, flip, render

logger = logging.getLogger(__name__)

SUPPORTED_NU = (0.5, 1.5, 2.5)
JITTER_START = 1e-10
JITTER_CAP = 1e-4


@dataclass(frozen=True)
class KernelParams:
    nu: float = 1.5
    length_scale: float = 12.0
    signal_var: float = 1.0
    noise_var: float = 1e-4
    frame_scale: float = 1.0

    def __post_init__(self):
        if self.nu not in SUPPORTED_NU:
            raise ValueError(f"nu must be one of {SUPPORTED_NU}, got {self.nu}")
        if self.length_scale <= 0 or self.signal_var <= 0 or self.noise_var < 0 or self.frame_scale <= 0:
            raise ValueError(f"invalid kernel parameters {self}")


class IndexPoint(NamedTuple):
    n: int
    y: int
    x: int
    r: int
    t: int = 1


# ------------- Kernel -------------------
def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    return arr.reshape(-1, 5)


def _embed(points: np.ndarray, params: KernelParams) -> np.ndarray:
    coords = np.array(points, dtype=np.float64, copy=True)
    coords[:, 0] *= params.frame_scale
    coords[:, 4] *= params.frame_scale
    return coords


def matern_from_distance(d: np.ndarray, params: KernelParams) -> np.ndarray:
    z = np.asarray(d, dtype=np.float64) / params.length_scale
    if params.nu == 0.5:
        k = np.exp(-z)
    elif params.nu == 1.5:
        s3 = np.sqrt(3.0) * z
        k = (1.0 + s3) * np.exp(-s3)
    else:
        s5 = np.sqrt(5.0) * z
        k = (1.0 + s5 + 5.0 / 3.0 * z ** 2) * np.exp(-s5)
    return params.signal_var * k


def kernel_matrix(a: np.ndarray, b: np.ndarray, params: KernelParams) -> np.ndarray:
    """Covariance between two (N, 5) arrays of index points."""
    d = cdist(_embed(_as_points(a), params), _embed(_as_points(b), params), metric="euclidean")
    return matern_from_distance(d, params)


def matern_kernel(a: Sequence[float], b: Sequence[float], params: KernelParams) -> float:
    if tuple(a) == tuple(b):
        return float(params.signal_var)
    return float(kernel_matrix(np.asarray(a)[None], np.asarray(b)[None], params)[0, 0])


# ------------- Prior means --------------
PriorMean = Callable[[np.ndarray], np.ndarray]


def zero_prior(points: np.ndarray) -> np.ndarray:
    return np.zeros(_as_points(points).shape[0])


def saliency_prior(smap: SaliencyVolume) -> PriorMean:
    """mu(n, y, x, r, t) = normalized prior(n, y, x) for every r and t."""
    values = normalize_saliency(smap).values

    def mean(points: np.ndarray) -> np.ndarray:
        idx = _as_points(points).astype(np.int64)
        return values[idx[:, 0], idx[:, 1], idx[:, 2]]

    mean.values = values  # type: ignore[attr-defined]
    return mean


# ------------- GP state -----------------
class GpState:
    """Observations, prior mean, kernel and the Cholesky factor of K + noise.

    `offset` is a constant added to the prior mean. Acquisition scores and
    extracted maps are measured relative to it.

    Single writer: `observe` extends the factor in place by one row.
    """

    def __init__(self, kernel: KernelParams = KernelParams(), prior_mean: Optional[PriorMean] = None):
        self.kernel = kernel
        self.prior_mean: PriorMean = prior_mean or zero_prior
        self._X = np.zeros((0, 5), dtype=np.float64)
        self._s = np.zeros(0)
        self._L = np.zeros((0, 0))
        self._noise = np.zeros(0)
        self._alpha = np.zeros(0)
        self._offset = 0.0

    def __len__(self) -> int:
        return self._X.shape[0]

    @property
    def points(self) -> np.ndarray:
        return self._X.copy()

    @property
    def values(self) -> np.ndarray:
        return self._s.copy()

    @property
    def factor(self) -> np.ndarray:
        return self._L.copy()

    @property
    def offset(self) -> float:
        return self._offset

    def set_offset(self, value: float) -> "GpState":
        if not np.isfinite(value):
            raise ValueError(f"offset must be finite, got {value}")
        self._offset = float(value)
        if len(self):
            self._alpha = cho_solve((self._L, True), self._s - self._mean(self._X), check_finite=False)
        return self

    def _mean(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(self.prior_mean(points), dtype=np.float64) + self._offset

    @property
    def noise_diag(self) -> np.ndarray:
        """Per-observation diagonal term: noise_var plus any escalation jitter."""
        return self._noise.copy()

    def observe(self, x: Sequence[int], s: float) -> "GpState":
        if not np.isfinite(s):
            raise ValueError(f"observation must be finite, got {s}")
        point = np.asarray(x, dtype=np.float64).reshape(1, 5)
        sig2 = self.kernel.signal_var
        base = sig2 + self.kernel.noise_var
        n = len(self)
        if n:
            col = kernel_matrix(self._X, point, self.kernel)[:, 0]
            row = solve_triangular(self._L, col, lower=True, check_finite=False)
            pivot = base - float(row @ row)
        else:
            row = np.zeros(0)
            pivot = base

        jitter = 0.0
        if pivot <= 0.0:
            jitter = JITTER_START * sig2
            while pivot + jitter <= 0.0 and jitter * 10 <= JITTER_CAP * sig2:
                jitter *= 10
            if pivot + jitter <= 0.0:
                raise NumericalError(
                    f"Schur complement pivot {pivot:.3e} stays non-positive after jitter {jitter:.1e}"
                )
            logger.debug("Jitter %.1e added to keep the factor positive definite", jitter)

        L = np.zeros((n + 1, n + 1))
        L[:n, :n] = self._L
        L[n, :n] = row
        L[n, n] = np.sqrt(pivot + jitter)
        self._L = L
        self._X = np.vstack([self._X, point])
        self._s = np.append(self._s, float(s))
        self._noise = np.append(self._noise, self.kernel.noise_var + jitter)
        self._alpha = cho_solve((self._L, True), self._s - self._mean(self._X), check_finite=False)
        return self

    def posterior_batch(self, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        q = _as_points(queries)
        mean = self._mean(q)
        if not len(self):
            return mean, np.full(q.shape[0], self.kernel.signal_var)
        ks = kernel_matrix(self._X, q, self.kernel)
        mean = mean + ks.T @ self._alpha
        v = solve_triangular(self._L, ks, lower=True, check_finite=False)
        var = self.kernel.signal_var - np.einsum("ij,ij->j", v, v)
        return mean, var

    def correction_batch(self, queries: np.ndarray) -> np.ndarray:
        """Posterior mean minus prior mean at the queries."""
        q = _as_points(queries)
        if not len(self):
            return np.zeros(q.shape[0])
        return kernel_matrix(self._X, q, self.kernel).T @ self._alpha

    @classmethod
    def from_observations(
        cls,
        kernel: KernelParams,
        observations: Sequence[Tuple[Sequence[int], float]],
        prior_mean: Optional[PriorMean] = None,
    ) -> "GpState":
        state = cls(kernel, prior_mean)
        for x, s in observations:
            state.observe(x, s)
        return state


def posterior(state: GpState, q: Sequence[int]) -> Tuple[float, float]:
    mean, var = state.posterior_batch(np.asarray(q)[None])
    return float(mean[0]), float(var[0])


def observe(state: GpState, x: Sequence[int], s: float) -> GpState:
    return state.observe(x, s)


def acquisition_batch(state: GpState, queries: np.ndarray, kappa: float) -> np.ndarray:
    mean, var = state.posterior_batch(queries)
    return np.abs(mean - state.offset) + kappa * np.sqrt(np.maximum(var, 0.0))


def acquisition(state: GpState, q: Sequence[int], kappa: float) -> float:
    if kappa < 0:
        raise ValueError(f"kappa must be >= 0, got {kappa}")
    return float(acquisition_batch(state, np.asarray(q)[None], kappa)[0])


# ------------- Refinement config --------
VARIANT_FLAGS = {
    "borex": dict(use_flip=True, weighted_avg=True, use_prior=True),
    "bo_baseline": dict(use_flip=False, weighted_avg=False, use_prior=False),
    "no_flip": dict(use_flip=False, weighted_avg=True, use_prior=True),
    "simple_avg": dict(use_flip=True, weighted_avg=False, use_prior=True),
    "no_prior": dict(use_flip=True, weighted_avg=True, use_prior=False),
}


@dataclass(frozen=True)
class RefineConfig:
    n_iters: int = 50
    sizes: Tuple[int, ...] = (5, 9, 13)
    spans: Tuple[int, ...] = (1,)
    kappa: float = 2.0
    candidate_stride: Optional[int] = None
    use_flip: bool = True
    weighted_avg: bool = True
    use_prior: bool = True
    offset_quantile: Optional[float] = 0.25

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(sorted({int(r) for r in self.sizes})))
        object.__setattr__(self, "spans", tuple(sorted({int(t) for t in self.spans})))
        if self.n_iters < 0:
            raise ValueError("n_iters must be >= 0")
        if not self.sizes or min(self.sizes) < 1:
            raise ValueError("sizes must be a non-empty set of positive side lengths")
        if not self.spans or min(self.spans) < 1:
            raise ValueError("spans must be a non-empty set of positive frame counts")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.candidate_stride is not None and self.candidate_stride < 1:
            raise ValueError("candidate_stride must be >= 1")
        if self.offset_quantile is not None and not 0.0 <= self.offset_quantile <= 1.0:
            raise ValueError("offset_quantile must lie in [0, 1]")

    def with_variant(self, name: str) -> "RefineConfig":
        if name not in VARIANT_FLAGS:
            raise ConfigError(f"unknown refinement variant {name!r}; expected one of {sorted(VARIANT_FLAGS)}")
        return replace(self, **VARIANT_FLAGS[name])

    def stride_for(self, shape: Shape3) -> int:
        if self.candidate_stride is not None:
            return self.candidate_stride
        return 2 if max(shape[1], shape[2]) <= 64 else 4


def _axis_knots(size: int, stride: int) -> np.ndarray:
    knots = np.arange(0, size, stride)
    if knots[-1] != size - 1:
        knots = np.append(knots, size - 1)
    return knots


def candidate_grid(cfg: RefineConfig, shape: Shape3) -> np.ndarray:
    """All candidates (n, y, x, r, t) in lexicographic order."""
    stride = cfg.stride_for(shape)
    axes = (
        np.arange(shape[0]),
        _axis_knots(shape[1], stride),
        _axis_knots(shape[2], stride),
        np.asarray(cfg.sizes),
        np.asarray(cfg.spans),
    )
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1).astype(np.float64)


def select_next(state: GpState, cfg: RefineConfig, shape: Shape3) -> IndexPoint:
    candidates = candidate_grid(cfg, shape)
    scores = acquisition_batch(state, candidates, cfg.kappa)
    # argmax returns the first maximum, which is the lexicographically smallest
    best = int(np.argmax(scores))
    return IndexPoint(*(int(v) for v in candidates[best]))


# ------------- Observation --------------
def observe_saliency(
    M: ClassifierPort,
    image: ImageVolume,
    label: Label,
    x: Sequence[int],
    cfg: RefineConfig,
    fill: float = 0.0,
    full_confidence: Optional[float] = None,
) -> float:
    """Confidence gap for the box mask at x.

    use_flip: M(i . flip(m)) - M(i . m); otherwise M(i) - M(i . m), reusing
    `full_confidence` for M(i) when the caller has it.
    """
    point = IndexPoint(*(int(v) for v in x))
    shape = image.spatial_shape
    if not (0 <= point.n < shape[0] and 0 <= point.y < shape[1] and 0 <= point.x < shape[2]):
        raise OutOfBounds(f"index point {point} outside volume {shape}")
    mask = render(MaskSpec(center=(point.n, point.y, point.x), side=point.r, span=point.t), shape)
    if cfg.use_flip:
        conf = evaluate_checked(M, [apply(image, flip(mask), fill), apply(image, mask, fill)], label)
        return float(conf[0] - conf[1])
    if full_confidence is None:
        full_confidence = float(evaluate_checked(M, [image], label)[0])
    masked = float(evaluate_checked(M, [apply(image, mask, fill)], label)[0])
    return full_confidence - masked


# ------------- Map extraction -----------
def _size_weights(cfg: RefineConfig) -> List[Tuple[int, int, float]]:
    norm = 1.0 / (len(cfg.sizes) * len(cfg.spans))
    out = []
    for r in cfg.sizes:
        for t in cfg.spans:
            w = 1.0 / (r * r * t) if cfg.weighted_avg else 1.0
            out.append((r, t, w * norm))
    return out


def _interp_axis(values: np.ndarray, knots: np.ndarray, size: int, axis: int) -> np.ndarray:
    if len(knots) == size:
        return values
    return interp1d(knots, values, axis=axis, kind="linear", assume_sorted=True)(np.arange(size))


def extract_map(state: GpState, cfg: RefineConfig, shape: Shape3) -> SaliencyVolume:
    """Weighted average of the posterior mean over sizes and spans.

    The prior part is evaluated at every pixel; the data-driven correction is
    evaluated on the candidate grid and bilinearly interpolated in between.
    The state's offset is left out, so N = 0 returns the averaged prior.
    """
    t_len, h, w = shape
    stride = cfg.stride_for(shape)
    ys, xs = _axis_knots(h, stride), _axis_knots(w, stride)
    weights = _size_weights(cfg)

    nn, yy, xx = np.meshgrid(np.arange(t_len), ys, xs, indexing="ij")
    base = np.stack([nn.reshape(-1), yy.reshape(-1), xx.reshape(-1)], axis=1).astype(np.float64)
    correction = np.zeros(base.shape[0])
    for r, t, wt in weights:
        q = np.hstack([base, np.full((base.shape[0], 1), r), np.full((base.shape[0], 1), t)])
        correction += wt * state.correction_batch(q)
    correction = correction.reshape(t_len, len(ys), len(xs))
    correction = _interp_axis(_interp_axis(correction, ys, h, axis=1), xs, w, axis=2)

    nn, yy, xx = np.meshgrid(np.arange(t_len), np.arange(h), np.arange(w), indexing="ij")
    pixels = np.stack([nn.reshape(-1), yy.reshape(-1), xx.reshape(-1)], axis=1).astype(np.float64)
    prior_total = np.zeros(pixels.shape[0])
    for r, t, wt in weights:
        q = np.hstack([pixels, np.full((pixels.shape[0], 1), r), np.full((pixels.shape[0], 1), t)])
        prior_total += wt * np.asarray(state.prior_mean(q), dtype=np.float64)
    return SaliencyVolume(prior_total.reshape(shape) + correction)


# ------------- End to end ---------------
def refine_state(
    M: ClassifierPort,
    image: ImageVolume,
    prior: Optional[SaliencyVolume],
    label: Label,
    cfg: RefineConfig,
    kernel: KernelParams = KernelParams(),
    fill: float = 0.0,
) -> GpState:
    """Run the acquisition loop and return the conditioned GP."""
    shape = image.spatial_shape
    prior_mean: Optional[PriorMean] = None
    if cfg.use_prior:
        if prior is None:
            raise ConfigError("refinement with use_prior needs a prior saliency map")
        if prior.shape != shape:
            raise ShapeError(f"prior shape {prior.shape} does not match image {shape}")
        prior_mean = saliency_prior(prior)
    state = GpState(kernel, prior_mean)

    full_confidence = None
    if cfg.n_iters and not cfg.use_flip:
        full_confidence = float(evaluate_checked(M, [image], label)[0])

    for j in range(cfg.n_iters):
        point = select_next(state, cfg, shape)
        s = observe_saliency(M, image, label, point, cfg, fill, full_confidence)
        state.observe(point, s)
        if cfg.offset_quantile is not None:
            state.set_offset(float(np.quantile(state.values, cfg.offset_quantile)))
        logger.debug("iteration %d: observed %.4f at %s", j, s, point)
    return state


def refine(
    M: ClassifierPort,
    image: ImageVolume,
    prior: Optional[SaliencyVolume],
    label: Label,
    cfg: RefineConfig,
    kernel: KernelParams = KernelParams(),
    fill: float = 0.0,
) -> SaliencyVolume:
    state = refine_state(M, image, prior, label, cfg, kernel, fill)
    return extract_map(state, cfg, image.spatial_shape)
