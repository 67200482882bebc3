"""Parking-space annotations: PKLot XML, YOLO TXT, and dataset splits."""

from __future__ import annotations

import math
import random
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import yaml

from archbench.errors import (
    BadFieldCount,
    BadOccupiedFlag,
    BadRatios,
    DenormalizedInput,
    DuplicateIds,
    MalformedXml,
    MissingGeometry,
    NonNumericField,
    OutOfBounds,
    RangeViolation,
)

EMPTY = 0
OCCUPIED = 1
PKLOT_SIZE = (1280, 720)
DEFAULT_NAMES = {EMPTY: "empty", OCCUPIED: "occupied"}
DEFAULT_RATIOS = (0.70, 0.20, 0.10)
DECIMALS = 6
# Boxes may poke this far (pixels) outside the image before conversion refuses them.
CLAMP_TOLERANCE = 0.5

_EMPTY_NAMES = {"empty", "e", "free", "vacant"}
_OCCUPIED_NAMES = {"occupied", "o", "busy"}

ImageSize = tuple[int, int]


@dataclass(frozen=True)
class PixelBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int = EMPTY

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise MissingGeometry(
                f"degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class YoloRecord:
    class_id: int
    x_center: float
    y_center: float
    width: float
    height: float

    @property
    def geometry(self) -> tuple[float, float, float, float]:
        return (self.x_center, self.y_center, self.width, self.height)

    @property
    def is_normalized(self) -> bool:
        return all(0.0 <= v <= 1.0 for v in self.geometry) and self.width > 0 and self.height > 0


@dataclass(frozen=True)
class ImageAnnotation:
    image_id: str
    image_size: ImageSize = PKLOT_SIZE
    boxes: tuple[PixelBox, ...] = ()

    def __post_init__(self):
        if min(self.image_size) <= 0:
            raise ValueError(f"image size must be positive, got {self.image_size}")


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    seed: int

    @property
    def sizes(self) -> tuple[int, int, int]:
        return (len(self.train), len(self.val), len(self.test))


@dataclass
class DatasetConfig:
    """Ultralytics-style ``data.yaml``: image/label roots plus class names."""

    path: str = "."
    train: str = "train.txt"
    val: str = "val.txt"
    test: str = "test.txt"
    names: dict[int, str] = field(default_factory=lambda: dict(DEFAULT_NAMES))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetConfig":
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        names = doc.get("names", DEFAULT_NAMES)
        if isinstance(names, list):
            names = dict(enumerate(names))
        return cls(
            path=str(doc.get("path", ".")),
            train=str(doc.get("train", "train.txt")),
            val=str(doc.get("val", "val.txt")),
            test=str(doc.get("test", "test.txt")),
            names={int(k): str(v) for k, v in names.items()},
        )

    def dump(self) -> str:
        doc = {"path": self.path, "train": self.train, "val": self.val, "test": self.test, "names": self.names}
        return yaml.safe_dump(doc, sort_keys=False)

    def occupancy_classes(self) -> dict[int, int]:
        """Map occupancy flag (0 empty / 1 occupied) to class id using ``names``."""
        out = {}
        for class_id, name in self.names.items():
            key = name.strip().lower()
            if key in _EMPTY_NAMES:
                out[EMPTY] = class_id
            elif key in _OCCUPIED_NAMES:
                out[OCCUPIED] = class_id
        if set(out) != {EMPTY, OCCUPIED}:
            raise ValueError(f"class names {self.names} do not name both an empty and an occupied class")
        return out


# -- PKLot XML -------------------------------------------------------------


def _float_attr(el: ET.Element, name: str) -> float:
    raw = el.get(name)
    if raw is None:
        raise MissingGeometry(f"<{el.tag}> lacks attribute {name!r}")
    try:
        return float(raw)
    except ValueError:
        raise MissingGeometry(f"<{el.tag}> attribute {name}={raw!r} is not numeric") from None


def _space_points(space: ET.Element) -> list[tuple[float, float]]:
    contour = space.find("contour")
    if contour is not None:
        points = [(_float_attr(p, "x"), _float_attr(p, "y")) for p in contour.findall("point")]
        if points:
            return points
    rect = space.find("rotatedRect")
    if rect is not None:
        center, size, angle = rect.find("center"), rect.find("size"), rect.find("angle")
        if center is None or size is None:
            raise MissingGeometry(f"space {space.get('id')}: rotatedRect lacks center/size")
        cx, cy = _float_attr(center, "x"), _float_attr(center, "y")
        w, h = _float_attr(size, "w"), _float_attr(size, "h")
        theta = math.radians(_float_attr(angle, "d")) if angle is not None else 0.0
        cos, sin = math.cos(theta), math.sin(theta)
        return [
            (cx + dx * cos - dy * sin, cy + dx * sin + dy * cos)
            for dx, dy in ((-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2), (-w / 2, h / 2))
        ]
    raise MissingGeometry(f"space {space.get('id')}: no contour or rotatedRect")


def parse_pklot_xml(
    text: str,
    image_id: str = "",
    image_size: Optional[ImageSize] = None,
    classes: Optional[Mapping[int, int]] = None,
) -> ImageAnnotation:
    """Reduce each PKLot parking space to the axis-aligned box of its contour.

    ``classes`` maps the ``occupied`` flag to a class id (default identity:
    0 = empty, 1 = occupied). Points are clamped to the image.
    """
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise MalformedXml(f"malformed XML: {exc}") from None
    if image_size is None:
        if root.get("width") and root.get("height"):
            image_size = (int(root.get("width")), int(root.get("height")))
        else:
            image_size = PKLOT_SIZE
    classes = dict(classes) if classes else {EMPTY: EMPTY, OCCUPIED: OCCUPIED}
    w, h = image_size

    boxes = []
    for space in root.iter("space"):
        flag = space.get("occupied")
        if flag is None or flag.strip() not in ("0", "1"):
            raise BadOccupiedFlag(f"space {space.get('id')}: occupied={flag!r}, expected 0 or 1")
        points = _space_points(space)
        xs = [min(max(x, 0.0), w) for x, _ in points]
        ys = [min(max(y, 0.0), h) for _, y in points]
        boxes.append(PixelBox(min(xs), min(ys), max(xs), max(ys), classes[int(flag)]))
    return ImageAnnotation(image_id or root.get("id", ""), image_size, tuple(boxes))


# -- YOLO TXT --------------------------------------------------------------


def to_yolo_record(box: PixelBox, image_size: ImageSize) -> YoloRecord:
    w, h = image_size
    tol = CLAMP_TOLERANCE
    if box.x_min < -tol or box.y_min < -tol or box.x_max > w + tol or box.y_max > h + tol:
        raise OutOfBounds(f"box {box.as_tuple()} exceeds image {w}x{h}")
    x0, y0 = max(box.x_min, 0.0), max(box.y_min, 0.0)
    x1, y1 = min(box.x_max, w), min(box.y_max, h)
    return YoloRecord(box.class_id, (x0 + x1) / (2 * w), (y0 + y1) / (2 * h), (x1 - x0) / w, (y1 - y0) / h)


def from_yolo_record(rec: YoloRecord, image_size: ImageSize) -> PixelBox:
    if not rec.is_normalized:
        raise DenormalizedInput(f"record geometry {rec.geometry} outside [0, 1]")
    w, h = image_size
    half_w, half_h = rec.width * w / 2, rec.height * h / 2
    cx, cy = rec.x_center * w, rec.y_center * h
    return PixelBox(cx - half_w, cy - half_h, cx + half_w, cy + half_h, rec.class_id)


def format_yolo_txt(records: Iterable[YoloRecord]) -> str:
    return "".join(
        f"{r.class_id} {r.x_center:.{DECIMALS}f} {r.y_center:.{DECIMALS}f} "
        f"{r.width:.{DECIMALS}f} {r.height:.{DECIMALS}f}\n"
        for r in records
    )


def parse_yolo_txt(text: str) -> list[YoloRecord]:
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 5:
            raise BadFieldCount(f"line {lineno}: expected 5 fields, got {len(fields)}")
        try:
            class_id = int(fields[0])
            geometry = [float(f) for f in fields[1:]]
        except ValueError:
            raise NonNumericField(f"line {lineno}: non-numeric field in {line!r}") from None
        rec = YoloRecord(class_id, *geometry)
        if class_id < 0 or not rec.is_normalized:
            raise RangeViolation(f"line {lineno}: values out of range in {line!r}")
        records.append(rec)
    return records


def annotation_to_yolo(ann: ImageAnnotation) -> list[YoloRecord]:
    return [to_yolo_record(b, ann.image_size) for b in ann.boxes]


# -- splitting -------------------------------------------------------------


def split_counts(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """Floor of each share; the leftover goes to train."""
    exact = [Fraction(str(r)) * n for r in ratios]
    counts = [math.floor(x) for x in exact]
    counts[0] += n - sum(counts)
    return tuple(counts)


def split_dataset(ids: Sequence[str], ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0) -> DatasetSplit:
    """Seeded shuffle of the sorted ids, cut into train/val/test."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must be three non-negative shares summing to 1, got {ratios}")
    if not ids:
        raise BadRatios("cannot split an empty id list")
    ordered = sorted(str(i) for i in ids)
    if len(set(ordered)) != len(ordered):
        raise DuplicateIds("id list contains duplicates")
    random.Random(seed).shuffle(ordered)
    n_train, n_val, _ = split_counts(len(ordered), ratios)
    return DatasetSplit(
        tuple(ordered[:n_train]),
        tuple(ordered[n_train : n_train + n_val]),
        tuple(ordered[n_train + n_val :]),
        seed,
    )
