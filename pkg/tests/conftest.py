import numpy as np
import pytest

from borex.core import DatasetItem, ImageVolume, Label, as_label, dataset_write
from borex.synthetic import make_items


class CountingStub:
    """Classifier whose confidence is the mean intensity of a fixed window."""

    serial = False

    def __init__(self, window=(slice(None), slice(None), slice(None)), label="target"):
        self.window = window
        self.label_set = (Label(label),)
        self.calls = 0
        self.batches = []

    def evaluate(self, volumes, label):
        self.calls += len(volumes)
        self.batches.append(len(volumes))
        return np.array([float(v.data[self.window].mean()) for v in volumes])


class ConstantStub:
    serial = False
    label_set = (Label("target"),)

    def __init__(self, value=0.5):
        self.value = value
        self.calls = 0

    def evaluate(self, volumes, label):
        self.calls += len(volumes)
        return np.full(len(volumes), self.value)


@pytest.fixture
def counting_stub():
    return CountingStub()


@pytest.fixture
def constant_stub():
    return ConstantStub()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_image(rng):
    return ImageVolume(rng.uniform(0.2, 1.0, size=(1, 8, 8, 1)).astype(np.float32))


@pytest.fixture
def region_item():
    image = np.full((1, 16, 16, 1), 0.2, dtype=np.float32)
    image[0, 4:10, 4:10, 0] = 0.9
    region = np.zeros((1, 16, 16), dtype=bool)
    region[0, 4:10, 4:10] = True
    return DatasetItem(image=ImageVolume(image), target=as_label("target"), region=region, id="box")


@pytest.fixture
def synth_dir(tmp_path):
    items = make_items(4, shape=(1, 16, 16), side=5, prior_snr=1.0, seed=3)
    directory = tmp_path / "data"
    dataset_write(str(directory), items)
    return directory
