import math

import numpy as np
import pytest

from borex.core import Label, SaliencyVolume, normalize_saliency
from borex.errors import ConfigError
from borex.gpr import (
    GpState,
    IndexPoint,
    KernelParams,
    RefineConfig,
    acquisition,
    candidate_grid,
    extract_map,
    kernel_matrix,
    matern_kernel,
    observe,
    posterior,
    refine,
    refine_state,
    saliency_prior,
    select_next,
)
from borex.synthetic import SyntheticClassifier, make_items


def closed_form_matern(d, nu, ell, sig2):
    z = d / ell
    if nu == 0.5:
        return sig2 * math.exp(-z)
    if nu == 1.5:
        return sig2 * (1 + math.sqrt(3) * z) * math.exp(-math.sqrt(3) * z)
    return sig2 * (1 + math.sqrt(5) * z + 5 * z * z / 3) * math.exp(-math.sqrt(5) * z)


# ------------- Kernel -------------------
def test_kernel_at_zero_distance_is_signal_variance():
    params = KernelParams(signal_var=2.5)
    assert matern_kernel((0, 3, 4, 5, 1), (0, 3, 4, 5, 1), params) == 2.5


def test_kernel_at_one_length_scale():
    params = KernelParams(nu=1.5, length_scale=12.0)
    expected = (1 + math.sqrt(3)) * math.exp(-math.sqrt(3))
    assert matern_kernel((0, 0, 0, 5, 1), (0, 12, 0, 5, 1), params) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
def test_kernel_closed_forms(nu):
    params = KernelParams(nu=nu, length_scale=7.0, signal_var=1.3)
    rng = np.random.default_rng(int(nu * 10))
    for _ in range(20):
        a, b = rng.integers(0, 20, size=5), rng.integers(0, 20, size=5)
        d = float(np.linalg.norm(a - b))
        assert matern_kernel(a, b, params) == pytest.approx(closed_form_matern(d, nu, 7.0, 1.3), rel=1e-12)


def test_frame_scale_stretches_time_axes():
    params = KernelParams(frame_scale=3.0)
    k = matern_kernel((1, 0, 0, 5, 2), (0, 0, 0, 5, 1), params)
    assert k == pytest.approx(closed_form_matern(math.sqrt(18.0), 1.5, 12.0, 1.0), rel=1e-12)


def test_kernel_rejects_unsupported_nu():
    with pytest.raises(ValueError):
        KernelParams(nu=1.0)


# ------------- Posterior ----------------
def random_points(rng, count):
    return np.column_stack([
        rng.integers(0, 4, count),
        rng.integers(0, 64, count),
        rng.integers(0, 64, count),
        rng.choice([5, 9, 13], count),
        rng.integers(1, 3, count),
    ]).astype(float)


def test_incremental_posterior_matches_dense_solve():
    rng = np.random.default_rng(2024)
    params = KernelParams()

    def prior(q):
        q = np.asarray(q).reshape(-1, 5)
        return 0.01 * q[:, 1] - 0.02 * q[:, 2]

    for _ in range(20):
        count = int(rng.integers(1, 201))
        X = random_points(rng, count)
        s = rng.normal(size=count)
        state = GpState.from_observations(params, list(zip(X, s)), prior_mean=prior)
        Q = random_points(rng, 25)

        K = kernel_matrix(X, X, params) + np.diag(state.noise_diag)
        Kinv = np.linalg.inv(K)
        Ks = kernel_matrix(X, Q, params)
        mean = prior(Q) + Ks.T @ Kinv @ (s - prior(X))
        var = params.signal_var - np.einsum("ij,ik,kj->j", Ks, Kinv, Ks)

        got_mean, got_var = state.posterior_batch(Q)
        np.testing.assert_allclose(got_mean, mean, rtol=1e-8, atol=1e-8)
        np.testing.assert_allclose(got_var, var, rtol=1e-8, atol=1e-8)


def test_empty_state_returns_prior():
    state = GpState(KernelParams(signal_var=2.0), prior_mean=lambda q: np.full(len(np.asarray(q).reshape(-1, 5)), 0.7))
    assert posterior(state, (0, 1, 1, 5, 1)) == (pytest.approx(0.7), pytest.approx(2.0))


def test_observed_point_is_nearly_interpolated():
    state = observe(GpState(KernelParams()), (0, 3, 3, 5, 1), 0.8)
    mean, var = posterior(state, (0, 3, 3, 5, 1))
    assert mean == pytest.approx(0.8, abs=1e-3)
    assert var < 1e-3


def test_duplicate_point_without_noise_adds_jitter():
    state = GpState(KernelParams(noise_var=0.0))
    state.observe((0, 1, 1, 5, 1), 0.3).observe((0, 1, 1, 5, 1), 0.3)
    assert state.noise_diag[0] == 0.0
    assert state.noise_diag[1] == pytest.approx(1e-10)
    assert np.all(np.isfinite(state.factor))


def test_non_finite_observation_is_rejected():
    with pytest.raises(ValueError):
        GpState().observe((0, 0, 0, 5, 1), float("nan"))


def test_posterior_variance_never_increases():
    rng = np.random.default_rng(11)
    state = GpState(KernelParams())
    queries = random_points(rng, 30)
    previous = state.posterior_batch(queries)[1]
    for x in random_points(rng, 40):
        state.observe(x, float(rng.normal()))
        current = state.posterior_batch(queries)[1]
        assert np.all(current <= previous + 1e-9)
        previous = current


def test_incremental_factor_matches_batch_cholesky():
    rng = np.random.default_rng(12)
    params = KernelParams()
    X = random_points(rng, 30)
    state = GpState.from_observations(params, [(x, float(rng.normal())) for x in X])
    batch = np.linalg.cholesky(kernel_matrix(X, X, params) + np.diag(state.noise_diag))
    np.testing.assert_allclose(state.factor, batch, rtol=0, atol=1e-9)


def test_observing_the_expected_value_changes_nothing():
    rng = np.random.default_rng(13)
    prior = saliency_prior(SaliencyVolume(rng.normal(size=(4, 64, 64))))
    queries = random_points(rng, 25)

    empty = GpState(KernelParams(), prior_mean=prior)
    x = (1, 20, 30, 9, 1)
    empty.observe(x, float(prior(np.asarray(x, dtype=float))[0]))
    np.testing.assert_allclose(empty.posterior_batch(queries)[0], prior(queries), rtol=0, atol=1e-9)

    state = GpState.from_observations(
        KernelParams(), [(p, float(rng.normal())) for p in random_points(rng, 10)], prior_mean=prior
    )
    before = state.posterior_batch(queries)[0]
    x = (2, 40, 10, 13, 2)
    expected = posterior(state, x)[0]
    state.observe(x, expected)
    assert posterior(state, x)[0] == pytest.approx(expected, abs=1e-9)
    np.testing.assert_allclose(state.posterior_batch(queries)[0], before, rtol=0, atol=1e-9)


def test_acquisition_is_abs_mean_plus_scaled_sd():
    state = GpState(KernelParams(), prior_mean=lambda q: np.full(len(np.asarray(q).reshape(-1, 5)), -0.4))
    assert acquisition(state, (0, 0, 0, 5, 1), 2.0) == pytest.approx(0.4 + 2.0)
    with pytest.raises(ValueError):
        acquisition(state, (0, 0, 0, 5, 1), -1.0)


# ------------- Search -------------------
def test_candidate_grid_contents_and_order():
    cfg = RefineConfig(sizes=(9, 5), spans=(1,), candidate_stride=3)
    grid = candidate_grid(cfg, (1, 8, 8))
    ys = sorted(set(grid[:, 1]))
    assert ys == [0, 3, 6, 7]
    assert grid.shape == (4 * 4 * 2, 5)
    assert [tuple(r) for r in grid] == sorted(tuple(r) for r in grid)


def test_default_stride_depends_on_image_size():
    cfg = RefineConfig()
    assert cfg.stride_for((1, 64, 64)) == 2
    assert cfg.stride_for((1, 65, 10)) == 4


def test_ties_pick_lexicographically_smallest():
    cfg = RefineConfig(sizes=(9, 5))
    assert select_next(GpState(), cfg, (1, 16, 16)) == IndexPoint(0, 0, 0, 5, 1)


def test_variant_flags():
    assert RefineConfig().with_variant("bo_baseline").use_prior is False
    assert RefineConfig().with_variant("no_flip").use_flip is False
    with pytest.raises(ConfigError):
        RefineConfig().with_variant("gradcam")


# ------------- Map extraction -----------
def constant_prior(c):
    return lambda q: np.full(np.asarray(q).reshape(-1, 5).shape[0], c)


def test_weighted_average_of_constant_mean():
    state = GpState(KernelParams(), prior_mean=constant_prior(2.0))
    smap = extract_map(state, RefineConfig(sizes=(2, 4)), (1, 6, 6))
    np.testing.assert_allclose(smap.values, 2.0 * (1 / 4 + 1 / 16) / 2, rtol=1e-15)


def test_simple_average_of_constant_mean():
    state = GpState(KernelParams(), prior_mean=constant_prior(2.0))
    smap = extract_map(state, RefineConfig(sizes=(2, 4), weighted_avg=False), (1, 6, 6))
    np.testing.assert_allclose(smap.values, 2.0, rtol=1e-15)


def test_video_weights_divide_by_volume():
    state = GpState(KernelParams(), prior_mean=constant_prior(1.0))
    smap = extract_map(state, RefineConfig(sizes=(2,), spans=(1, 2)), (3, 4, 4))
    np.testing.assert_allclose(smap.values, (1 / 4 + 1 / 8) / 2, rtol=1e-15)


def test_zero_iterations_return_scaled_prior(small_image, counting_stub):
    prior = SaliencyVolume(np.random.default_rng(0).normal(size=(1, 8, 8)))
    smap = refine(counting_stub, small_image, prior, Label("target"), RefineConfig(n_iters=0, sizes=(2, 4)))
    np.testing.assert_allclose(smap.values, normalize_saliency(prior).values * 0.15625, rtol=1e-12)
    assert counting_stub.calls == 0


# ------------- Refinement loop ----------
def test_flip_variant_spends_two_calls_per_iteration(small_image, counting_stub):
    prior = SaliencyVolume(np.zeros((1, 8, 8)))
    refine(counting_stub, small_image, prior, Label("target"), RefineConfig(n_iters=7, sizes=(3,)))
    assert counting_stub.calls == 14


def test_baseline_spends_one_call_per_iteration_plus_one(small_image, counting_stub):
    cfg = RefineConfig(n_iters=7, sizes=(3,)).with_variant("bo_baseline")
    refine(counting_stub, small_image, None, Label("target"), cfg)
    assert counting_stub.calls == 8


def test_prior_required_when_enabled(small_image, counting_stub):
    with pytest.raises(ConfigError):
        refine(counting_stub, small_image, None, Label("target"), RefineConfig(n_iters=1))


def test_state_records_every_observation(small_image, counting_stub):
    state = refine_state(counting_stub, small_image, None, Label("target"),
                         RefineConfig(n_iters=5, sizes=(3,)).with_variant("no_prior"))
    assert len(state) == 5
    assert state.offset == pytest.approx(np.quantile(state.values, 0.25))


def test_video_refinement_keeps_shape(counting_stub, rng):
    from borex.core import ImageVolume

    video = ImageVolume(rng.uniform(0.1, 1.0, size=(3, 8, 8, 1)).astype(np.float32))
    cfg = RefineConfig(n_iters=4, sizes=(3,), spans=(1, 2)).with_variant("bo_baseline")
    smap = refine(counting_stub, video, None, Label("target"), cfg, KernelParams(frame_scale=2.0))
    assert smap.shape == (3, 8, 8)


def test_baseline_finds_the_region(region_item):
    clf = SyntheticClassifier.for_item("region_fraction", region_item)
    cfg = RefineConfig(n_iters=30, sizes=(5,)).with_variant("bo_baseline")
    smap = refine(clf, region_item.image, None, region_item.target, cfg)
    peak = np.unravel_index(np.argmax(smap.values), smap.shape)
    assert region_item.region[peak]


def test_zero_prior_refinement_peaks_inside_the_region():
    item = make_items(10, shape=(1, 32, 32), side=8, seed=9)[1]
    clf = SyntheticClassifier.for_item("region_fraction", item)
    cfg = RefineConfig(n_iters=50, sizes=(5, 9, 13), kappa=2.0).with_variant("no_prior")
    state = refine_state(clf, item.image, None, item.target, cfg)
    smap = extract_map(state, cfg, item.image.spatial_shape)
    assert state.values.max() > 0.0
    peak = np.unravel_index(np.argmax(smap.values), smap.shape)
    assert item.region[peak]


# ------------- Offset -------------------
def test_acquisition_is_measured_from_the_offset():
    state = GpState(KernelParams()).observe((0, 4, 4, 5, 1), -1.0).observe((0, 20, 20, 5, 1), -1.0)
    state.set_offset(-1.0)
    mean, var = posterior(state, (0, 4, 4, 5, 1))
    assert mean == pytest.approx(-1.0, abs=1e-3)
    assert acquisition(state, (0, 4, 4, 5, 1), 0.0) == pytest.approx(0.0, abs=1e-3)
    far_mean, _ = posterior(state, (0, 60, 60, 13, 1))
    assert far_mean == pytest.approx(-1.0, abs=1e-3)


def test_offset_does_not_enter_the_extracted_map():
    prior = SaliencyVolume(np.random.default_rng(3).normal(size=(1, 6, 6)))
    state = GpState(KernelParams(), prior_mean=saliency_prior(prior)).set_offset(-0.7)
    cfg = RefineConfig(sizes=(3,), weighted_avg=False)
    np.testing.assert_allclose(extract_map(state, cfg, (1, 6, 6)).values, normalize_saliency(prior).values,
                               rtol=1e-12)


def test_offset_quantile_is_validated():
    with pytest.raises(ValueError):
        RefineConfig(offset_quantile=1.5)


# ------------- Oracles ------------------
def toy_state(rng, shape, sizes, count=6):
    prior = saliency_prior(SaliencyVolume(rng.normal(size=shape)))
    t_len, h, w = shape
    obs = [((0, int(rng.integers(0, h)), int(rng.integers(0, w)), int(rng.choice(sizes)), 1), float(rng.normal()))
           for _ in range(count)]
    state = GpState.from_observations(KernelParams(length_scale=3.0), obs, prior_mean=prior)
    return state.set_offset(-0.3)


def test_select_next_matches_exhaustive_argmax():
    rng = np.random.default_rng(21)
    cfg = RefineConfig(sizes=(3, 5), kappa=1.5, candidate_stride=1)
    state = toy_state(rng, (1, 8, 8), cfg.sizes)
    best, best_score = None, -np.inf
    for y in range(8):
        for x in range(8):
            for r in cfg.sizes:
                score = acquisition(state, (0, y, x, r, 1), cfg.kappa)
                if score > best_score:
                    best, best_score = IndexPoint(0, y, x, r, 1), score
    assert select_next(state, cfg, (1, 8, 8)) == best


def direct_map(state, cfg, shape):
    """Average of posterior mean minus offset over sizes, pixel by pixel."""
    t_len, h, w = shape
    out = np.zeros(shape)
    for n in range(t_len):
        for y in range(h):
            for x in range(w):
                total = 0.0
                for r in cfg.sizes:
                    weight = 1.0 / (r * r) if cfg.weighted_avg else 1.0
                    total += weight * (posterior(state, (n, y, x, r, 1))[0] - state.offset)
                out[n, y, x] = total / len(cfg.sizes)
    return out


@pytest.mark.parametrize("weighted", [True, False])
def test_extract_map_matches_direct_summation(weighted):
    rng = np.random.default_rng(22)
    cfg = RefineConfig(sizes=(3, 5), candidate_stride=1, weighted_avg=weighted)
    state = toy_state(rng, (1, 7, 7), cfg.sizes)
    np.testing.assert_allclose(extract_map(state, cfg, (1, 7, 7)).values, direct_map(state, cfg, (1, 7, 7)),
                               rtol=0, atol=1e-9)


def test_extract_map_interpolates_the_correction_between_knots():
    rng = np.random.default_rng(23)
    cfg = RefineConfig(sizes=(3, 5), candidate_stride=2)
    state = toy_state(rng, (1, 9, 9), cfg.sizes)
    smap = extract_map(state, cfg, (1, 9, 9)).values
    exact = direct_map(state, cfg, (1, 9, 9))
    prior_part = state.prior_mean(np.array([[0, y, x, 3, 1] for y in range(9) for x in range(9)], dtype=float))
    prior_part = prior_part.reshape(1, 9, 9) * sum(1.0 / (r * r) for r in cfg.sizes) / len(cfg.sizes)
    correction = exact - prior_part

    knots = np.ix_([0], [0, 2, 4, 6, 8], [0, 2, 4, 6, 8])
    np.testing.assert_allclose(smap[knots], exact[knots], rtol=0, atol=1e-9)
    midpoint = correction[0, [2, 2, 4, 4], [2, 4, 2, 4]].mean()
    assert smap[0, 3, 3] - prior_part[0, 3, 3] == pytest.approx(midpoint, abs=1e-9)
    edge = correction[0, 4, [6, 8]].mean()
    assert smap[0, 4, 7] - prior_part[0, 4, 7] == pytest.approx(edge, abs=1e-9)
