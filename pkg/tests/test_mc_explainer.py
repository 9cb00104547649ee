import itertools

import numpy as np
import pytest

from borex.core import ImageVolume, Label
from borex.errors import ClassifierError
from borex.masking import MaskDistributionParams
from borex.mc_explainer import PN_RISE, RISE, McConfig, estimate, estimate_pn_rise, estimate_rise


class ProductStub:
    """Non-linear in the mask: product of two quadrant means."""

    serial = False
    label_set = (Label("t"),)

    def evaluate(self, volumes, label):
        return np.array([v.data[0, :2, :2].mean() * v.data[0, 2:, 2:].mean() + 0.1 * v.data[0, :2, 2:].mean()
                         for v in volumes])


def brute_force(image, p, fill=0.0):
    """(E[M | m(l)=1], E[M | m(l)=0]) per pixel by enumerating all 2x2 cell patterns."""
    stub = ProductStub()
    pos = np.zeros((4, 4))
    neg = np.zeros((4, 4))
    for bits in itertools.product((0, 1), repeat=4):
        cells = np.array(bits).reshape(2, 2)
        m = np.kron(cells, np.ones((2, 2))).astype(bool)
        prob = np.prod([p if b else 1 - p for b in bits])
        masked = np.where(m[None, :, :, None], image.data, fill).astype(np.float32)
        score = stub.evaluate([ImageVolume(masked)], "t")[0]
        pos += prob * score * m
        neg += prob * score * ~m
    return pos / p, neg / (1 - p)


@pytest.fixture
def tiny_image():
    return ImageVolume(np.random.default_rng(5).uniform(0.1, 1.0, size=(1, 4, 4, 1)).astype(np.float32))


@pytest.mark.parametrize("p", [0.5, 0.3])
def test_exhaustive_rise_is_conditional_expectation(tiny_image, p):
    cfg = McConfig(dist=MaskDistributionParams(cell_grid=(2, 2), keep_prob=p), exhaustive=True, batch=5)
    pos, _ = brute_force(tiny_image, p)
    smap = estimate_rise(ProductStub(), tiny_image, Label("t"), cfg)
    np.testing.assert_allclose(smap.values[0], pos, rtol=0, atol=1e-12)


@pytest.mark.parametrize("p", [0.5, 0.3])
def test_exhaustive_pn_rise_is_pos_minus_neg(tiny_image, p):
    cfg = McConfig(dist=MaskDistributionParams(cell_grid=(2, 2), keep_prob=p), exhaustive=True, variant=PN_RISE)
    pos, neg = brute_force(tiny_image, p)
    smap = estimate(ProductStub(), tiny_image, Label("t"), cfg)
    np.testing.assert_allclose(smap.values[0], pos - neg, rtol=0, atol=1e-12)


def test_constant_classifier_gives_flat_maps(constant_stub, small_image):
    cfg = McConfig(n_masks=40, dist=MaskDistributionParams(cell_grid=(2, 2)))
    rise = estimate_rise(constant_stub, small_image, Label("target"), cfg)
    pn = estimate_pn_rise(constant_stub, small_image, Label("target"), cfg)
    assert constant_stub.calls == 80
    # sum_n m_n / (N p) averages to about 1; PN cancels the constant
    assert rise.values.mean() == pytest.approx(0.5, abs=0.1)
    assert np.abs(pn.values).max() < 1.0


def test_batches_and_seeded_draws(counting_stub, small_image):
    cfg = McConfig(n_masks=70, batch=32, variant=RISE)
    a = estimate(counting_stub, small_image, Label("target"), cfg, np.random.default_rng(3))
    b = estimate(counting_stub, small_image, Label("target"), cfg, np.random.default_rng(3))
    assert counting_stub.batches == [32, 32, 6, 32, 32, 6]
    np.testing.assert_array_equal(a.values, b.values)


def test_classifier_failure_names_mask_index(small_image):
    class FailsLate:
        serial = False
        label_set = ()

        def __init__(self):
            self.seen = 0

        def evaluate(self, volumes, label):
            self.seen += len(volumes)
            if self.seen > 10:
                raise RuntimeError("gpu on fire")
            return np.zeros(len(volumes))

    cfg = McConfig(n_masks=20, batch=8)
    with pytest.raises(ClassifierError, match=r"mask 8"):
        estimate_rise(FailsLate(), small_image, Label("t"), cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        McConfig(n_masks=0)
    with pytest.raises(ValueError):
        McConfig(variant="gradcam")
