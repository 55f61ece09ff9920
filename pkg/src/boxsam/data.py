"""Core data model: images, masks, boxes, manifests, connected components.

Masks are kept as float arrays in [0, 1]. A mask is "binary" when every
value is exactly 0.0 or 1.0; files store masks as single-channel 8-bit
PNG with value = round(v * 255), so binary masks round-trip exactly.
Boxes use the half-open pixel convention [x_min, x_max) x [y_min, y_max).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi
from PIL import Image

from .errors import DataError

_STRUCTURES = {
    4: np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8),
    8: np.ones((3, 3), dtype=np.uint8),
}


def is_binary(values: np.ndarray) -> bool:
    """True iff every value is exactly 0 or 1."""
    return bool(np.isin(values, (0.0, 1.0)).all())


def _as_values(mask) -> np.ndarray:
    """Accept a MaskMap or a bare HxW array and return the value array."""
    values = mask.values if isinstance(mask, MaskMap) else np.asarray(mask)
    if values.ndim != 2:
        raise DataError(f"mask must be 2-D, got shape {values.shape}")
    return values


def _require_binary(values: np.ndarray, op: str) -> np.ndarray:
    if not is_binary(values):
        raise DataError(f"{op} requires a binary mask (values in {{0, 1}})")
    return values


class MaskRole(enum.Enum):
    GROUND_TRUTH = "ground-truth"
    PSEUDO_LABEL = "pseudo-label"
    PREDICTION = "prediction"


@dataclass
class ImageSample:
    """An RGB image with pixel values in [0, 1]."""

    id: str
    pixels: np.ndarray  # H x W x 3 float

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DataError(f"image must be HxWx3, got {self.pixels.shape}")
        if self.height < 8 or self.width < 8:
            raise DataError(f"image must be at least 8x8, got {self.pixels.shape[:2]}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise DataError("image pixel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class MaskMap:
    """A single-channel map in [0, 1] tagged with its role in the pipeline.

    Ground-truth and pseudo-label masks must be binary; predictions may be
    soft.
    """

    values: np.ndarray
    role: MaskRole = MaskRole.PREDICTION

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise DataError(f"mask must be 2-D, got shape {self.values.shape}")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise DataError("mask values must lie in [0, 1]")
        if self.role in (MaskRole.GROUND_TRUTH, MaskRole.PSEUDO_LABEL) and not self.binary:
            raise DataError(f"{self.role.value} masks must be binary")

    @property
    def binary(self) -> bool:
        return is_binary(self.values)

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass(frozen=True, order=True)
class BBox:
    """Axis-aligned pixel rectangle, half-open: [x_min, x_max) x [y_min, y_max)."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DataError(f"degenerate box {self.as_list()}")
        if self.x_min < 0 or self.y_min < 0:
            raise DataError(f"negative box coordinates {self.as_list()}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    def intersects(self, other: "BBox") -> bool:
        """Positive-area rectangle intersection; touching edges do not count."""
        return (self.x_min < other.x_max and other.x_min < self.x_max
                and self.y_min < other.y_max and other.y_min < self.y_max)

    def union(self, other: "BBox") -> "BBox":
        return BBox(min(self.x_min, other.x_min), min(self.y_min, other.y_min),
                    max(self.x_max, other.x_max), max(self.y_max, other.y_max))

    def as_list(self) -> list:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, xyxy) -> "BBox":
        x0, y0, x1, y1 = (int(v) for v in xyxy)
        return cls(x0, y0, x1, y1)


@dataclass
class ComponentLabeling:
    """Label map with 0 = background and components numbered 1..count."""

    labels: np.ndarray
    count: int


def connected_components(mask, connectivity: int = 8) -> ComponentLabeling:
    """Label the connected components of a binary mask.

    Components are renumbered so that label order follows the raster-scan
    position of each component's first pixel, making the labeling
    deterministic regardless of the backend's internal order.
    """
    values = _require_binary(_as_values(mask), "connected_components")
    if connectivity not in _STRUCTURES:
        raise DataError(f"connectivity must be 4 or 8, got {connectivity}")
    raw, count = ndi.label(values > 0, structure=_STRUCTURES[connectivity])
    if count == 0:
        return ComponentLabeling(np.zeros_like(raw, dtype=np.int32), 0)
    flat = raw.ravel()
    nonzero = np.flatnonzero(flat)
    # first raster index at which each label appears
    order = np.full(count + 1, flat.size, dtype=np.int64)
    np.minimum.at(order, flat[nonzero], nonzero)
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[np.argsort(order[1:]) + 1] = np.arange(1, count + 1)
    return ComponentLabeling(remap[raw].astype(np.int32), count)


def _tight_box(labels: np.ndarray, label: int) -> BBox:
    ys, xs = np.nonzero(labels == label)
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def merge_overlapping_boxes(boxes: list) -> list:
    """Replace intersecting boxes by their union until no pair intersects."""
    merged = list(boxes)
    changed = True
    while changed:
        changed = False
        out = []
        for box in merged:
            for k, other in enumerate(out):
                if box.intersects(other):
                    out[k] = other.union(box)
                    changed = True
                    break
            else:
                out.append(box)
        merged = out
    return merged


def boxes_from_mask(mask, merge_overlaps: bool = False, connectivity: int = 8) -> list:
    """Tight box per connected component, optionally merged to a fixed point.

    With merging enabled, any two boxes whose rectangles overlap with
    positive area are replaced by their union, repeated until stable.
    Result is sorted by (y_min, x_min).
    """
    labeling = connected_components(mask, connectivity)
    boxes = [_tight_box(labeling.labels, lab) for lab in range(1, labeling.count + 1)]
    if merge_overlaps:
        boxes = merge_overlapping_boxes(boxes)
    return sorted(boxes, key=lambda b: (b.y_min, b.x_min))


def count_boxes(pseudo_label) -> int:
    """Number of annotation-style boxes a binary mask induces (merged)."""
    return len(boxes_from_mask(pseudo_label, merge_overlaps=True))


def save_mask(path, mask) -> None:
    """Write a [0, 1] mask as single-channel 8-bit PNG (value = round(v*255))."""
    values = _as_values(mask)
    if values.min() < 0.0 or values.max() > 1.0:
        raise DataError("mask values must lie in [0, 1] to be saved")
    data = np.rint(np.asarray(values, dtype=np.float64) * 255.0).astype(np.uint8)
    path = Path(path)
    try:
        Image.fromarray(data, mode="L").save(path, format="PNG")
    except OSError as exc:
        raise DataError(f"cannot write mask to {path}: {exc}") from exc


def load_mask(path) -> np.ndarray:
    """Load an 8-bit mask file back to float values in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("L"), dtype=np.float32)
    except OSError as exc:
        raise DataError(f"cannot read mask from {path}: {exc}") from exc
    return data / 255.0


def save_image(path, pixels: np.ndarray) -> None:
    """Write an HxWx3 [0, 1] image as 8-bit RGB PNG."""
    data = np.rint(np.asarray(pixels, dtype=np.float64) * 255.0).astype(np.uint8)
    path = Path(path)
    try:
        Image.fromarray(data, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise DataError(f"cannot write image to {path}: {exc}") from exc


def load_image(path, sample_id: str | None = None) -> ImageSample:
    path = Path(path)
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("RGB"), dtype=np.float32)
    except OSError as exc:
        raise DataError(f"cannot read image from {path}: {exc}") from exc
    return ImageSample(sample_id or path.stem, data / 255.0)


@dataclass
class ManifestEntry:
    sample_id: str
    image_path: Path
    gt_mask_path: Path | None = None
    boxes: list = field(default_factory=list)
    pseudo_label_path: Path | None = None
    split: str = "train"  # train | flagged | test


@dataclass
class DatasetManifest:
    """The record set binding images, masks, boxes and splits.

    Serialized as JSON with a top-level "entries" key; paths are stored
    relative to the manifest file so datasets relocate cleanly.
    """

    entries: list

    def __post_init__(self):
        ids = [e.sample_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate sample ids in manifest: {dupes}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def get(self, sample_id: str) -> ManifestEntry:
        for entry in self.entries:
            if entry.sample_id == sample_id:
                return entry
        raise DataError(f"no sample {sample_id!r} in manifest")

    def subset(self, split: str) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.split == split])

    def save(self, path) -> None:
        path = Path(path)
        base = path.parent.resolve()

        def rel(p):
            if p is None:
                return None
            p = Path(p).resolve()
            try:
                return p.relative_to(base).as_posix()
            except ValueError:
                return p.as_posix()

        doc = {"entries": [
            {
                "id": e.sample_id,
                "image": rel(e.image_path),
                "gt_mask": rel(e.gt_mask_path),
                "boxes": [b.as_list() for b in e.boxes],
                "pseudo_label": rel(e.pseudo_label_path),
                "split": e.split,
            }
            for e in self.entries
        ]}
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
        if "entries" not in doc:
            raise DataError(f"manifest {path} lacks top-level 'entries'")
        base = path.parent

        def resolve(rec, key, required):
            raw = rec.get(key)
            if raw is None:
                if required:
                    raise DataError(f"manifest entry {rec.get('id')!r} lacks {key!r}")
                return None
            p = Path(raw)
            if not p.is_absolute():
                p = base / p
            if not p.exists():
                raise DataError(f"manifest references missing file: {p}")
            return p

        entries = []
        for rec in doc["entries"]:
            entries.append(ManifestEntry(
                sample_id=rec["id"],
                image_path=resolve(rec, "image", required=True),
                gt_mask_path=resolve(rec, "gt_mask", required=False),
                boxes=[BBox.from_list(b) for b in rec.get("boxes", [])],
                pseudo_label_path=resolve(rec, "pseudo_label", required=False),
                split=rec.get("split", "train"),
            ))
        return cls(entries)
