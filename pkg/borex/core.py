# borex/core.py
"""
Domain types shared by every other module, plus the on-disk formats.

Tensor files (images, regions, priors, saliency maps):

    20-byte header  b"BXT1", u32 T, u32 H, u32 W, u32 C   (little-endian)
    payload         T*H*W*C float32 little-endian values, row-major

Region files use C=1 with values in {0.0, 1.0}; prior and saliency files use
C=1 with signed values.

Dataset manifest (JSON):

    {"items": [{"image": "img0.bxt", "label": "target",
                "region": "reg0.bxt" | null, "prior": "prior0.bxt" | null,
                "id": "optional-name"}]}

Relative paths are resolved against the manifest's directory.
"""
from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, NewType, Optional, Protocol, Sequence, Tuple, runtime_checkable

import numpy as np

from borex.errors import ClassifierError, EmptyRegion, InvalidSaliency, ManifestError, ShapeError

logger = logging.getLogger(__name__)

MAGIC = b"BXT1"
_HEADER = struct.Struct("<4sIIII")
MANIFEST_NAME = "manifest.json"

Label = NewType("Label", str)
Shape3 = Tuple[int, int, int]


def as_label(token: Any) -> Label:
    if not isinstance(token, str) or not token:
        raise ValueError(f"label must be a non-empty string, got {token!r}")
    return Label(token)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


# ------------- Volumes ------------------
@dataclass(frozen=True)
class ImageVolume:
    """A T x H x W x C tensor with values in [0, 1]. T == 1 is a still image."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"image volume must be 4-D (T,H,W,C), got shape {arr.shape}")
        t, h, w, c = arr.shape
        if min(t, h, w) < 1 or c not in (1, 3):
            raise ShapeError(f"invalid image shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image values must be finite and within [0, 1]")
        object.__setattr__(self, "data", _frozen(arr))

    @classmethod
    def from_array(cls, arr: Any) -> "ImageVolume":
        """Accepts (H,W), (H,W,C) or (T,H,W,C) arrays."""
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None, :, :, None]
        elif arr.ndim == 3:
            arr = arr[None]
        return cls(arr)

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def spatial_shape(self) -> Shape3:
        t, h, w, _ = self.data.shape
        return (t, h, w)


@dataclass(frozen=True)
class SaliencyVolume:
    """Signed per-pixel saliency aligned with an image's (T, H, W)."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.size == 0:
            raise ShapeError(f"saliency volume must be 3-D (T,H,W), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidSaliency("saliency values must be finite")
        object.__setattr__(self, "values", _frozen(arr))

    @property
    def shape(self) -> Shape3:
        return self.values.shape  # type: ignore[return-value]


def normalize_saliency(smap: SaliencyVolume | np.ndarray) -> SaliencyVolume:
    """Scale by 1/max|v| so values land in [-1, 1]; all-zero maps pass through."""
    values = smap.values if isinstance(smap, SaliencyVolume) else np.asarray(smap, dtype=np.float64)
    if values.size == 0:
        raise InvalidSaliency("cannot normalize an empty saliency map")
    if not np.all(np.isfinite(values)):
        raise InvalidSaliency("saliency map contains non-finite values")
    peak = float(np.max(np.abs(values)))
    if peak == 0.0:
        return smap if isinstance(smap, SaliencyVolume) else SaliencyVolume(values)
    return SaliencyVolume(values / peak)


# ------------- Classifier port ----------
@runtime_checkable
class ClassifierPort(Protocol):
    """Black-box classifier: a batch of volumes and a label in, confidences out.

    Implementations must be deterministic. `serial = True` tells the harness
    not to share the instance between worker threads.
    """

    label_set: Sequence[Label]
    serial: bool

    def evaluate(self, volumes: Sequence[ImageVolume], label: Label) -> np.ndarray:
        ...


def evaluate_checked(
    classifier: ClassifierPort,
    volumes: Sequence[ImageVolume],
    label: Label,
    first_index: Optional[int] = None,
) -> np.ndarray:
    """Call the classifier and validate what comes back."""
    try:
        out = np.asarray(classifier.evaluate(list(volumes), label), dtype=np.float64).reshape(-1)
    except ClassifierError:
        raise
    except Exception as e:
        raise ClassifierError(f"classifier failed: {e}", mask_index=first_index) from e
    if out.shape[0] != len(volumes):
        raise ClassifierError(
            f"classifier returned {out.shape[0]} confidences for {len(volumes)} inputs",
            mask_index=first_index,
        )
    if not np.all(np.isfinite(out)) or out.min(initial=0.0) < 0.0 or out.max(initial=0.0) > 1.0:
        raise ClassifierError("classifier confidences must lie in [0, 1]", mask_index=first_index)
    return out


# ------------- Dataset items ------------
@dataclass(frozen=True)
class DatasetItem:
    image: ImageVolume
    target: Label
    region: Optional[np.ndarray] = None
    prior: Optional[SaliencyVolume] = None
    id: str = "item"
    meta: Dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.region is not None:
            region = np.asarray(self.region).astype(bool)
            if region.ndim == 4 and region.shape[-1] == 1:
                region = region[..., 0]
            if region.shape != self.image.spatial_shape:
                raise ShapeError(
                    f"{self.id}: region shape {region.shape} does not match image {self.image.spatial_shape}"
                )
            if not region.any():
                raise EmptyRegion(f"{self.id}: region has no true cell")
            object.__setattr__(self, "region", _frozen(region))
        if self.prior is not None and self.prior.shape != self.image.spatial_shape:
            raise ShapeError(
                f"{self.id}: prior shape {self.prior.shape} does not match image {self.image.spatial_shape}"
            )


# ------------- Tensor files -------------
def write_tensor(path: str, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise ShapeError(f"tensor must be (T,H,W[,C]), got shape {arr.shape}")
    t, h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, t, h, w, c))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_tensor(path: str) -> np.ndarray:
    """Return the (T,H,W,C) float32 payload of a tensor file."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ShapeError(f"{path}: truncated header")
    magic, t, h, w, c = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ShapeError(f"{path}: bad magic {magic!r}")
    expected = t * h * w * c * 4
    if len(raw) - _HEADER.size != expected:
        raise ShapeError(f"{path}: payload has {len(raw) - _HEADER.size} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(t, h, w, c).astype(np.float32)


def read_saliency(path: str) -> SaliencyVolume:
    arr = read_tensor(path)
    if arr.shape[-1] != 1:
        raise ShapeError(f"{path}: saliency tensors must have C=1")
    return SaliencyVolume(arr[..., 0])


def read_region(path: str) -> np.ndarray:
    arr = read_tensor(path)
    if arr.shape[-1] != 1:
        raise ShapeError(f"{path}: region tensors must have C=1")
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise ShapeError(f"{path}: region values must be 0 or 1")
    return arr[..., 0] > 0.5


# ------------- Manifest -----------------
def _item_lines(text: str) -> List[int]:
    """1-based line where each entry of the "items" array starts."""
    decoder = json.JSONDecoder()
    try:
        pos = text.index("[", text.index('"items"')) + 1
    except ValueError:
        return []
    lines = []
    while pos < len(text):
        while pos < len(text) and text[pos] in " \t\r\n,":
            pos += 1
        if pos >= len(text) or text[pos] == "]":
            break
        lines.append(text.count("\n", 0, pos) + 1)
        _, pos = decoder.raw_decode(text, pos)
    return lines


def _manifest_path(path: str) -> str:
    return os.path.join(path, MANIFEST_NAME) if os.path.isdir(path) else path


def dataset_load(path: str) -> List[DatasetItem]:
    """Load every entry of a manifest (file path or directory holding manifest.json)."""
    manifest = _manifest_path(path)
    base = os.path.dirname(os.path.abspath(manifest))
    with open(manifest, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestError(e.msg, line=e.lineno) from e
    if not isinstance(doc, dict) or not isinstance(doc.get("items"), list):
        raise ManifestError('manifest must be an object with an "items" array', line=1)
    lines = _item_lines(text)

    def resolve(p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(base, p)

    items: List[DatasetItem] = []
    for idx, entry in enumerate(doc["items"]):
        line = lines[idx] if idx < len(lines) else 1
        if not isinstance(entry, dict):
            raise ManifestError("item must be an object", line=line)
        if not isinstance(entry.get("image"), str):
            raise ManifestError('item needs an "image" path', line=line)
        try:
            label = as_label(entry.get("label"))
        except ValueError as e:
            raise ManifestError(str(e), line=line) from e
        item_id = str(entry.get("id") or f"item{idx:03d}")
        try:
            image = ImageVolume(read_tensor(resolve(entry["image"])))
            region = read_region(resolve(entry["region"])) if entry.get("region") else None
            prior = read_saliency(resolve(entry["prior"])) if entry.get("prior") else None
        except OSError as e:
            raise ManifestError(f"cannot read tensor: {e}", line=line) from e
        items.append(DatasetItem(image=image, target=label, region=region, prior=prior, id=item_id))
    logger.info("Loaded %d items from %s", len(items), manifest)
    return items


def dataset_write(directory: str, items: Sequence[DatasetItem]) -> str:
    """Write items as tensor files plus manifest.json; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for item in items:
        image_name = f"{item.id}_image.bxt"
        write_tensor(os.path.join(directory, image_name), item.image.data)
        entry: Dict[str, Any] = {"id": item.id, "image": image_name, "label": item.target, "region": None, "prior": None}
        if item.region is not None:
            entry["region"] = f"{item.id}_region.bxt"
            write_tensor(os.path.join(directory, entry["region"]), item.region.astype(np.float32))
        if item.prior is not None:
            entry["prior"] = f"{item.id}_prior.bxt"
            write_tensor(os.path.join(directory, entry["prior"]), item.prior.values)
        entries.append(entry)
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"items": entries}, f, indent=2)
    return path
