import json
import struct

import numpy as np
import pytest

from borex.core import (
    DatasetItem,
    ImageVolume,
    SaliencyVolume,
    as_label,
    dataset_load,
    dataset_write,
    evaluate_checked,
    normalize_saliency,
    read_region,
    read_saliency,
    read_tensor,
    write_tensor,
)
from borex.errors import ClassifierError, EmptyRegion, InvalidSaliency, ManifestError, ShapeError


def test_image_volume_validates_shape_and_range():
    with pytest.raises(ShapeError):
        ImageVolume(np.zeros((4, 4, 1), dtype=np.float32))
    with pytest.raises(ShapeError):
        ImageVolume(np.zeros((1, 4, 4, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        ImageVolume(np.full((1, 4, 4, 1), 1.5, dtype=np.float32))


def test_image_volume_is_read_only():
    vol = ImageVolume(np.zeros((1, 2, 2, 1), dtype=np.float32))
    with pytest.raises(ValueError):
        vol.data[0, 0, 0, 0] = 1.0


def test_from_array_promotes_2d_and_3d():
    assert ImageVolume.from_array(np.zeros((5, 6))).shape == (1, 5, 6, 1)
    assert ImageVolume.from_array(np.zeros((5, 6, 3))).shape == (1, 5, 6, 3)
    vid = ImageVolume.from_array(np.zeros((4, 5, 6, 1)))
    assert vid.spatial_shape == (4, 5, 6)


def test_saliency_rejects_non_finite():
    with pytest.raises(InvalidSaliency):
        SaliencyVolume(np.array([[[0.0, np.nan]]]))
    assert SaliencyVolume(np.zeros((3, 3))).shape == (1, 3, 3)


def test_normalize_saliency_scales_to_unit_peak():
    s = normalize_saliency(SaliencyVolume(np.array([[[2.0, -4.0, 1.0]]])))
    np.testing.assert_allclose(s.values, [[[0.5, -1.0, 0.25]]])
    zero = normalize_saliency(SaliencyVolume(np.zeros((1, 2, 2))))
    assert np.all(zero.values == 0.0)


def test_label_must_be_non_empty():
    with pytest.raises(ValueError):
        as_label("")
    assert as_label("cat") == "cat"


def test_evaluate_checked_wraps_failures(small_image):
    class Broken:
        label_set = ()
        serial = False

        def evaluate(self, volumes, label):
            raise RuntimeError("boom")

    class OutOfRange(Broken):
        def evaluate(self, volumes, label):
            return np.full(len(volumes), 1.2)

    with pytest.raises(ClassifierError, match="mask 7"):
        evaluate_checked(Broken(), [small_image], "x", first_index=7)
    with pytest.raises(ClassifierError):
        evaluate_checked(OutOfRange(), [small_image], "x")


def test_dataset_item_checks_region(small_image):
    with pytest.raises(EmptyRegion):
        DatasetItem(image=small_image, target=as_label("t"), region=np.zeros((1, 8, 8), dtype=bool))
    with pytest.raises(ShapeError):
        DatasetItem(image=small_image, target=as_label("t"), region=np.ones((1, 4, 4), dtype=bool))


def test_tensor_file_layout(tmp_path):
    arr = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4) / 24
    path = tmp_path / "t.bxt"
    write_tensor(str(path), arr)
    raw = path.read_bytes()
    assert raw[:4] == b"BXT1"
    assert struct.unpack("<IIII", raw[4:20]) == (2, 3, 4, 1)
    assert len(raw) == 20 + arr.size * 4
    np.testing.assert_array_equal(read_tensor(str(path))[..., 0], arr)


def test_truncated_tensor_is_rejected(tmp_path):
    path = tmp_path / "bad.bxt"
    write_tensor(str(path), np.zeros((1, 2, 2), dtype=np.float32))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ShapeError):
        read_tensor(str(path))


def test_region_file_must_be_binary(tmp_path):
    path = tmp_path / "r.bxt"
    write_tensor(str(path), np.full((1, 2, 2), 0.5, dtype=np.float32))
    with pytest.raises(ShapeError):
        read_region(str(path))


def test_dataset_write_then_load(tmp_path, region_item):
    prior = SaliencyVolume(np.linspace(-1, 1, 256).reshape(1, 16, 16))
    item = DatasetItem(image=region_item.image, target=region_item.target, region=region_item.region, prior=prior,
                       id="first")
    manifest = dataset_write(str(tmp_path), [item])
    loaded = dataset_load(str(tmp_path))
    assert manifest.endswith("manifest.json")
    assert len(loaded) == 1 and loaded[0].id == "first"
    np.testing.assert_array_equal(loaded[0].region, item.region)
    np.testing.assert_allclose(loaded[0].prior.values, prior.values, rtol=1e-6)
    np.testing.assert_allclose(read_saliency(str(tmp_path / "first_prior.bxt")).values, prior.values, rtol=1e-6)


def test_manifest_default_ids(tmp_path, small_image):
    write_tensor(str(tmp_path / "a.bxt"), small_image.data)
    (tmp_path / "m.json").write_text(json.dumps({"items": [{"image": "a.bxt", "label": "t"}]}))
    assert dataset_load(str(tmp_path / "m.json"))[0].id == "item000"


def test_manifest_error_reports_line(tmp_path, small_image):
    write_tensor(str(tmp_path / "a.bxt"), small_image.data)
    text = '{\n  "items": [\n    {"image": "a.bxt", "label": "t"},\n    {"label": "t"}\n  ]\n}\n'
    (tmp_path / "manifest.json").write_text(text)
    with pytest.raises(ManifestError) as exc:
        dataset_load(str(tmp_path))
    assert exc.value.line == 4


def test_manifest_syntax_error_line(tmp_path):
    (tmp_path / "manifest.json").write_text('{\n  "items": [\n    {"image": }\n  ]\n}\n')
    with pytest.raises(ManifestError) as exc:
        dataset_load(str(tmp_path))
    assert exc.value.line == 3


def test_normalize_saliency_is_idempotent_and_keeps_top_k():
    rng = np.random.default_rng(5)
    for _ in range(20):
        raw = SaliencyVolume(rng.normal(scale=rng.uniform(0.1, 10.0), size=(2, 6, 7)))
        once = normalize_saliency(raw)
        np.testing.assert_array_equal(normalize_saliency(once).values, once.values)
        order_raw = np.argsort(-raw.values.ravel(), kind="stable")
        order_once = np.argsort(-once.values.ravel(), kind="stable")
        for k in range(1, raw.values.size + 1):
            assert set(order_raw[:k]) == set(order_once[:k])


def test_manifest_prior_shape_mismatch(tmp_path):
    write_tensor(str(tmp_path / "img.bxt"), np.zeros((1, 32, 32, 1), dtype=np.float32))
    write_tensor(str(tmp_path / "prior.bxt"), np.zeros((1, 16, 16), dtype=np.float32))
    (tmp_path / "manifest.json").write_text(
        json.dumps({"items": [{"image": "img.bxt", "label": "t", "prior": "prior.bxt"}]})
    )
    with pytest.raises(ShapeError):
        dataset_load(str(tmp_path))
