# borex/synthetic.py
"""
Classifiers with analytically known behaviour, and the synthetic datasets
they are evaluated on.

Confidence of the region classifiers. For a region pixel l with reference
value ref(l) and input value x(l) (channel means of absolute differences):

    occ(l)  = clip(|x(l) - ref(l)| / |fill - ref(l)|, 0, 1)   (0 when fill == ref)
    vis(R)  = 1 - mean_{l in R} occ(l)

    region_fraction   conf = vis(R) ** gamma, R the union of all regions
    multi_region_max  conf = max_k vis(R_k) ** gamma
    constant          conf = c

With binary masks and the classifier's own fill value, vis(R) is exactly the
fraction of region pixels left visible.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from borex.core import DatasetItem, ImageVolume, Label, SaliencyVolume, as_label, dataset_write
from borex.errors import ClassifierError, OutOfBounds, ShapeError

logger = logging.getLogger(__name__)

KINDS = ("region_fraction", "multi_region_max", "constant")
Box = Tuple[int, int, int, int]  # (y0, x0, y1, x1), half-open, every frame


@dataclass
class SyntheticClassifier:
    kind: str
    reference: Optional[ImageVolume] = None
    regions: Sequence[np.ndarray] = ()
    constant: float = 0.5
    gamma: float = 1.0
    fill: float = 0.0
    label: Label = Label("target")
    serial: bool = field(default=False, init=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown synthetic classifier {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.constant <= 1.0:
            raise ValueError("constant confidence must lie in [0, 1]")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.kind != "constant":
            if self.reference is None or not self.regions:
                raise ValueError(f"{self.kind} needs a reference image and at least one region")
            regions = [np.asarray(r).astype(bool) for r in self.regions]
            for r in regions:
                if r.shape != self.reference.spatial_shape:
                    raise ShapeError(f"region shape {r.shape} does not match reference {self.reference.spatial_shape}")
                if not r.any():
                    raise ValueError("regions must contain at least one cell")
            self.regions = regions
            ref = self.reference.data.astype(np.float64)
            self._scale = np.abs(self.fill - ref).mean(axis=-1)

    @property
    def label_set(self) -> Tuple[Label, ...]:
        return (self.label,)

    @classmethod
    def from_boxes(cls, kind: str, reference: ImageVolume, boxes: Sequence[Box], **kwargs) -> "SyntheticClassifier":
        t_len, h, w = reference.spatial_shape
        regions = []
        for y0, x0, y1, x1 in boxes:
            if not (0 <= y0 < y1 <= h and 0 <= x0 < x1 <= w):
                raise OutOfBounds(f"box {(y0, x0, y1, x1)} outside image {h}x{w}")
            r = np.zeros((t_len, h, w), dtype=bool)
            r[:, y0:y1, x0:x1] = True
            regions.append(r)
        return cls(kind=kind, reference=reference, regions=regions, **kwargs)

    @classmethod
    def for_item(cls, kind: str, item: DatasetItem, **kwargs) -> "SyntheticClassifier":
        """Build the classifier for one dataset item, using its image as reference.

        multi_region_max splits the item's region into connected components.
        """
        kwargs.setdefault("label", item.target)
        if kind == "constant":
            return cls(kind=kind, **kwargs)
        if item.region is None:
            raise ValueError(f"{item.id}: {kind} classifier needs an annotated region")
        if kind == "multi_region_max":
            labelled, count = ndimage.label(item.region)
            regions = [labelled == k for k in range(1, count + 1)]
        else:
            regions = [item.region]
        return cls(kind=kind, reference=item.image, regions=regions, **kwargs)

    def visible_fraction(self, image: ImageVolume, region: np.ndarray) -> float:
        diff = np.abs(image.data.astype(np.float64) - self.reference.data).mean(axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            occ = np.where(self._scale > 0, np.clip(diff / self._scale, 0.0, 1.0), 0.0)
        return float(1.0 - occ[region].mean())

    def confidence(self, image: ImageVolume) -> float:
        if self.kind == "constant":
            return float(self.constant)
        if image.spatial_shape != self.reference.spatial_shape:
            raise ShapeError(f"input shape {image.spatial_shape} does not match {self.reference.spatial_shape}")
        if self.kind == "region_fraction":
            union = np.logical_or.reduce(self.regions)
            return float(np.clip(self.visible_fraction(image, union) ** self.gamma, 0.0, 1.0))
        return float(max(np.clip(self.visible_fraction(image, r) ** self.gamma, 0.0, 1.0) for r in self.regions))

    def evaluate(self, volumes: Sequence[ImageVolume], label: Label) -> np.ndarray:
        if label != self.label:
            raise ClassifierError(f"label {label!r} not in {self.label_set}")
        return np.array([self.confidence(v) for v in volumes], dtype=np.float64)


# ------------- Synthetic data -----------
def random_boxes(rng: np.random.Generator, size: Tuple[int, int], count: int, side: int) -> List[Box]:
    """`count` disjoint side x side boxes with at least one pixel between them."""
    h, w = size
    if side > min(h, w):
        raise ValueError(f"box side {side} does not fit a {h}x{w} image")
    boxes: List[Box] = []
    for _ in range(1000 * count):
        if len(boxes) == count:
            break
        y0 = int(rng.integers(0, h - side + 1))
        x0 = int(rng.integers(0, w - side + 1))
        box = (y0, x0, y0 + side, x0 + side)
        if all(box[2] + 1 <= b[0] or b[2] + 1 <= box[0] or box[3] + 1 <= b[1] or b[3] + 1 <= box[1] for b in boxes):
            boxes.append(box)
    if len(boxes) < count:
        raise ValueError(f"could not place {count} disjoint {side}x{side} boxes in {h}x{w}")
    return boxes


def region_image(
    rng: np.random.Generator, shape: Tuple[int, int, int], boxes: Sequence[Box], channels: int = 1
) -> Tuple[ImageVolume, np.ndarray]:
    """Dim textured background with bright boxes; returns (image, region)."""
    t_len, h, w = shape
    data = rng.uniform(0.0, 0.4, size=(t_len, h, w, channels))
    region = np.zeros(shape, dtype=bool)
    for y0, x0, y1, x1 in boxes:
        region[:, y0:y1, x0:x1] = True
    data[region] = rng.uniform(0.6, 1.0, size=(int(region.sum()), channels))
    return ImageVolume(data.astype(np.float32)), region


def noisy_prior(rng: np.random.Generator, region: np.ndarray, snr: float) -> SaliencyVolume:
    """Region indicator plus Gaussian noise; snr is the unit region amplitude squared over the noise variance."""
    if snr <= 0:
        raise ValueError(f"snr must be positive, got {snr}")
    signal = region.astype(np.float64)
    return SaliencyVolume(signal + rng.normal(0.0, 1.0 / np.sqrt(snr), size=signal.shape))


def make_items(
    n_items: int,
    shape: Tuple[int, int, int] = (1, 32, 32),
    n_regions: int = 1,
    side: int = 8,
    prior_snr: Optional[float] = None,
    channels: int = 1,
    seed: int = 0,
    label: str = "target",
) -> List[DatasetItem]:
    rng = np.random.default_rng(seed)
    items = []
    for idx in range(n_items):
        boxes = random_boxes(rng, shape[1:], n_regions, side)
        image, region = region_image(rng, shape, boxes, channels)
        prior = noisy_prior(rng, region, prior_snr) if prior_snr is not None else None
        items.append(DatasetItem(image=image, target=as_label(label), region=region, prior=prior, id=f"item{idx:03d}"))
    return items


def synth_dataset(directory: str, n_items: int, **kwargs) -> str:
    items = make_items(n_items, **kwargs)
    path = dataset_write(directory, items)
    logger.info("Wrote %d synthetic items to %s", len(items), path)
    return path
