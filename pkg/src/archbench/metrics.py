"""Detection metrics: IoU, NMS, greedy matching, PR curves, AP/mAP and occupancy confusion."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from archbench.annot import (
    OCCUPIED,
    PKLOT_SIZE,
    ImageSize,
    PixelBox,
    YoloRecord,
    from_yolo_record,
    to_yolo_record,
)
from archbench.errors import (
    BadFieldCount,
    DenormalizedInput,
    EmptyClass,
    NoGroundTruth,
    NonNumericField,
    RangeViolation,
)

SCHEMA_VERSION = 1
DEFAULT_IOU = 0.5
DEFAULT_CONF = 0.25
AP_METHODS = ("interp101", "allpoint")


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    box: PixelBox
    class_id: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class IoUThresholdSet:
    thresholds: tuple[float, ...]

    @classmethod
    def map50(cls) -> "IoUThresholdSet":
        return cls((0.5,))

    @classmethod
    def coco(cls) -> "IoUThresholdSet":
        # round() keeps 0.6, 0.7, ... bit-identical to their literals
        return cls(tuple(round(0.5 + 0.05 * i, 2) for i in range(10)))


@dataclass(frozen=True)
class PRCurve:
    points: tuple[tuple[float, float], ...]
    class_id: int = 0

    @property
    def recalls(self) -> list[float]:
        return [r for r, _ in self.points]

    @property
    def precisions(self) -> list[float]:
        return [p for _, p in self.points]


@dataclass(frozen=True)
class MatchResult:
    """Greedy assignment for one image.

    ``det_to_gt[i]`` is the ground-truth index matched by detection ``i``
    (input order), or ``None`` for a false positive.
    """

    det_to_gt: tuple[Optional[int], ...]
    n_gt: int

    @property
    def tp(self) -> int:
        return sum(m is not None for m in self.det_to_gt)

    @property
    def fp(self) -> int:
        return len(self.det_to_gt) - self.tp

    @property
    def fn(self) -> int:
        return self.n_gt - self.tp


@dataclass(frozen=True)
class Confusion:
    TP: int = 0
    TN: int = 0
    FP: int = 0
    FN: int = 0
    undetected: int = 0

    def as_dict(self) -> dict[str, int]:
        return {"TP": self.TP, "TN": self.TN, "FP": self.FP, "FN": self.FN, "undetected": self.undetected}


@dataclass(frozen=True)
class MeanAP:
    map50: float
    map5095: float
    per_class: dict[int, dict[float, float]]


def iou(a: PixelBox, b: PixelBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _by_confidence(dets: Sequence[DetectionRecord]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: -dets[i].confidence)


def nms(dets: Sequence[DetectionRecord], iou_thresh: float) -> list[DetectionRecord]:
    """Greedy per-image, per-class suppression; survivors in descending confidence."""
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1], got {iou_thresh}")
    kept: list[DetectionRecord] = []
    for i in _by_confidence(dets):
        d = dets[i]
        if not any(
            k.image_id == d.image_id and k.class_id == d.class_id and iou(k.box, d.box) > iou_thresh for k in kept
        ):
            kept.append(d)
    return kept


def match_detections(
    dets: Sequence[DetectionRecord],
    gts: Sequence[PixelBox],
    iou_thresh: float = DEFAULT_IOU,
    class_agnostic: bool = False,
) -> MatchResult:
    """Greedy confidence-ordered matching within one image.

    Each detection takes the unmatched ground truth of its class with the
    highest IoU >= ``iou_thresh``; the lower GT index wins IoU ties.
    """
    taken = [False] * len(gts)
    det_to_gt: list[Optional[int]] = [None] * len(dets)
    for i in _by_confidence(dets):
        d = dets[i]
        best, best_iou = None, -1.0
        for j, g in enumerate(gts):
            if taken[j] or (not class_agnostic and g.class_id != d.class_id):
                continue
            v = iou(d.box, g)
            if v >= iou_thresh and v > best_iou:
                best, best_iou = j, v
        if best is not None:
            taken[best] = True
            det_to_gt[i] = best
    return MatchResult(tuple(det_to_gt), len(gts))


def pr_curve(scored: Iterable[tuple[float, bool]], n_gt: int, class_id: int = 0) -> PRCurve:
    """Precision/recall at every distinct confidence, swept high to low.

    ``scored`` holds one ``(confidence, is_true_positive)`` pair per detection.
    """
    if n_gt <= 0:
        raise EmptyClass(f"class {class_id} has no ground truth; AP is undefined")
    ordered = sorted(scored, key=lambda s: -s[0])
    points = []
    tp = fp = 0
    for i, (conf, hit) in enumerate(ordered):
        tp += bool(hit)
        fp += not hit
        if i + 1 == len(ordered) or ordered[i + 1][0] != conf:
            points.append((tp / n_gt, tp / (tp + fp)))
    return PRCurve(tuple(points), class_id)


def average_precision(curve: PRCurve, method: str = "interp101") -> float:
    """Area under the precision envelope (running max from high recall back).

    ``allpoint`` integrates the envelope exactly; ``interp101`` averages it at
    recalls 0, 0.01, ..., 1.
    """
    if method not in AP_METHODS:
        raise ValueError(f"unknown AP method {method!r}; expected one of {AP_METHODS}")
    if not curve.points:
        return 0.0
    recall = np.asarray(curve.recalls, dtype=float)
    envelope = np.maximum.accumulate(np.asarray(curve.precisions, dtype=float)[::-1])[::-1]
    if method == "allpoint":
        steps = np.diff(np.concatenate(([0.0], recall)))
        return float(np.sum(steps * envelope))
    idx = np.searchsorted(recall, np.linspace(0.0, 1.0, 101), side="left")
    sampled = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(sampled.mean())


def _group(dets: Iterable[DetectionRecord]) -> dict[str, list[DetectionRecord]]:
    out: dict[str, list[DetectionRecord]] = defaultdict(list)
    for d in dets:
        out[d.image_id].append(d)
    return out


def class_scores(
    dets: Sequence[DetectionRecord],
    gts: Mapping[str, Sequence[PixelBox]],
    class_id: int,
    iou_thresh: float,
) -> tuple[list[tuple[float, bool]], int]:
    """Scored TP/FP labels for one class across all images, plus its GT count."""
    per_image = _group(d for d in dets if d.class_id == class_id)
    scored: list[tuple[float, bool]] = []
    n_gt = 0
    for image_id in sorted(set(per_image) | set(gts)):
        img_gts = [g for g in gts.get(image_id, ()) if g.class_id == class_id]
        img_dets = per_image.get(image_id, [])
        n_gt += len(img_gts)
        result = match_detections(img_dets, img_gts, iou_thresh)
        scored += [(d.confidence, m is not None) for d, m in zip(img_dets, result.det_to_gt)]
    return scored, n_gt


def _gt_classes(gts: Mapping[str, Sequence[PixelBox]]) -> list[int]:
    return sorted({g.class_id for boxes in gts.values() for g in boxes})


def _mean(values: Sequence[float]) -> float:
    # rounding can push a float mean an ulp outside [min, max]; keep it inside
    return min(max(math.fsum(values) / len(values), min(values)), max(values))


def mean_ap(
    dets: Sequence[DetectionRecord],
    gts: Mapping[str, Sequence[PixelBox]],
    thresholds: IoUThresholdSet = IoUThresholdSet.coco(),
    method: str = "interp101",
) -> MeanAP:
    """Class-mean AP at IoU 0.5 and averaged over ``thresholds``.

    Classes without ground truth are left out of the mean.
    """
    classes = _gt_classes(gts)
    if not classes:
        raise NoGroundTruth("ground truth contains no boxes")
    levels = list(thresholds.thresholds)
    if 0.5 not in levels:
        levels = [0.5] + levels
    per_class: dict[int, dict[float, float]] = {}
    for c in classes:
        per_class[c] = {}
        for t in levels:
            scored, n_gt = class_scores(dets, gts, c, t)
            per_class[c][t] = average_precision(pr_curve(scored, n_gt, c), method)
    map_at = {t: _mean([per_class[c][t] for c in classes]) for t in levels}
    map5095 = _mean([map_at[t] for t in thresholds.thresholds])
    return MeanAP(map_at[0.5], map5095, per_class)


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float]:
    if min(tp, fp, fn) < 0:
        raise ValueError("confusion counts must be non-negative")
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return precision, recall


def occupancy_confusion(pairs: Iterable[tuple[int, Optional[int]]], occupied: int = OCCUPIED) -> Confusion:
    """2x2 slot confusion from ``(gt_class, predicted_class or None)`` pairs.

    Slots without a matched detection are counted as ``undetected``.
    """
    counts = dict(TP=0, TN=0, FP=0, FN=0, undetected=0)
    for truth, pred in pairs:
        if pred is None:
            counts["undetected"] += 1
        elif truth == occupied:
            counts["TP" if pred == occupied else "FN"] += 1
        else:
            counts["FP" if pred == occupied else "TN"] += 1
    return Confusion(**counts)


def slot_pairs(
    dets: Sequence[DetectionRecord],
    gts: Mapping[str, Sequence[PixelBox]],
    iou_thresh: float = DEFAULT_IOU,
) -> list[tuple[int, Optional[int]]]:
    """Class-agnostic slot/detection pairing feeding :func:`occupancy_confusion`."""
    per_image = _group(dets)
    pairs: list[tuple[int, Optional[int]]] = []
    for image_id in sorted(gts):
        img_gts = list(gts[image_id])
        img_dets = per_image.get(image_id, [])
        result = match_detections(img_dets, img_gts, iou_thresh, class_agnostic=True)
        pred_for = {m: img_dets[i].class_id for i, m in enumerate(result.det_to_gt) if m is not None}
        pairs += [(g.class_id, pred_for.get(j)) for j, g in enumerate(img_gts)]
    return pairs


# -- dataset-level report ---------------------------------------------------


@dataclass(frozen=True)
class OperatingPoint:
    conf: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def as_dict(self) -> dict[str, float]:
        return {
            "conf": self.conf,
            "Precision": self.precision,
            "Recall": self.recall,
            "F1": self.f1,
            "TP": self.tp,
            "FP": self.fp,
            "FN": self.fn,
        }


@dataclass(frozen=True)
class EvalReport:
    model: str
    map50: float
    map5095: float
    precision: float
    recall: float
    per_class: dict[int, dict[float, float]]
    confusion: Confusion
    unmatched_gt: int
    unmatched_detections: int
    fixed_point: OperatingPoint
    max_f1_point: OperatingPoint
    iou: float = DEFAULT_IOU
    method: str = "interp101"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "model": self.model,
            "Precision": self.precision,
            "Recall": self.recall,
            "mAP50": self.map50,
            "mAP50:95": self.map5095,
            "per_class_ap": {
                str(c): {f"{t:.2f}": ap for t, ap in sorted(aps.items())} for c, aps in sorted(self.per_class.items())
            },
            "confusion": self.confusion.as_dict(),
            "unmatched_gt": self.unmatched_gt,
            "unmatched_detections": self.unmatched_detections,
            "operating_points": {
                "fixed_conf": self.fixed_point.as_dict(),
                "max_f1": self.max_f1_point.as_dict(),
            },
            "iou": self.iou,
            "ap_method": self.method,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _operating_points(
    dets: Sequence[DetectionRecord],
    gts: Mapping[str, Sequence[PixelBox]],
    iou_thresh: float,
) -> list[OperatingPoint]:
    """P/R at every distinct confidence, pooled over classes and images.

    Greedy matching is confidence ordered, so the matching of ``conf >= t``
    is a prefix of the full matching.
    """
    n_gt = sum(len(b) for b in gts.values())
    labels: list[tuple[float, bool]] = []
    for c in sorted({d.class_id for d in dets} | set(_gt_classes(gts))):
        scored, _ = class_scores(dets, gts, c, iou_thresh)
        labels += scored
    labels.sort(key=lambda s: -s[0])
    points = []
    tp = fp = 0
    for i, (conf, hit) in enumerate(labels):
        tp += hit
        fp += not hit
        if i + 1 == len(labels) or labels[i + 1][0] != conf:
            p, r = precision_recall(tp, fp, n_gt - tp)
            points.append(OperatingPoint(conf, p, r, tp, fp, n_gt - tp))
    return points


def evaluate(
    dets: Sequence[DetectionRecord],
    gts: Mapping[str, Sequence[PixelBox]],
    iou_thresh: float = DEFAULT_IOU,
    conf: float = DEFAULT_CONF,
    thresholds: IoUThresholdSet = IoUThresholdSet.coco(),
    method: str = "interp101",
    model: str = "",
) -> EvalReport:
    """Full metric bundle: mAP over all detections, P/R and confusion at ``conf``."""
    m = mean_ap(dets, gts, thresholds, method)
    kept = [d for d in dets if d.confidence >= conf]
    n_gt = sum(len(b) for b in gts.values())
    tp = fp = 0
    for c in sorted({d.class_id for d in kept} | set(_gt_classes(gts))):
        scored, _ = class_scores(kept, gts, c, iou_thresh)
        tp += sum(hit for _, hit in scored)
        fp += sum(not hit for _, hit in scored)
    p, r = precision_recall(tp, fp, n_gt - tp)
    fixed = OperatingPoint(conf, p, r, tp, fp, n_gt - tp)
    sweep = _operating_points(dets, gts, iou_thresh)
    # ties keep the higher-confidence point
    best = max(sweep, key=lambda op: op.f1) if sweep else OperatingPoint(1.0, *precision_recall(0, 0, n_gt), 0, 0, n_gt)
    confusion = occupancy_confusion(slot_pairs(kept, gts, iou_thresh))
    return EvalReport(
        model=model,
        map50=m.map50,
        map5095=m.map5095,
        precision=p,
        recall=r,
        per_class=m.per_class,
        confusion=confusion,
        unmatched_gt=fixed.fn,
        unmatched_detections=fixed.fp,
        fixed_point=fixed,
        max_f1_point=best,
        iou=iou_thresh,
        method=method,
    )


def parse_predictions(text: str, image_size: ImageSize = PKLOT_SIZE) -> list[DetectionRecord]:
    """``<image_id> <class_id> <confidence> <x_center> <y_center> <width> <height>`` per line."""
    dets = []
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 7:
            raise BadFieldCount(f"line {lineno}: expected 7 fields, got {len(fields)}")
        try:
            class_id, confidence = int(fields[1]), float(fields[2])
            geometry = [float(f) for f in fields[3:]]
        except ValueError:
            raise NonNumericField(f"line {lineno}: non-numeric field in {line!r}") from None
        if not 0.0 <= confidence <= 1.0:
            raise RangeViolation(f"line {lineno}: confidence {confidence} outside [0, 1]")
        try:
            box = from_yolo_record(YoloRecord(class_id, *geometry), image_size)
        except DenormalizedInput as exc:
            raise RangeViolation(f"line {lineno}: {exc}") from None
        dets.append(DetectionRecord(fields[0], box, class_id, confidence))
    return dets


def format_predictions(dets: Iterable[DetectionRecord], image_size: ImageSize = PKLOT_SIZE) -> str:
    lines = []
    for d in dets:
        r = to_yolo_record(d.box, image_size)
        lines.append(
            f"{d.image_id} {d.class_id} {d.confidence:.6f} "
            f"{r.x_center:.6f} {r.y_center:.6f} {r.width:.6f} {r.height:.6f}\n"
        )
    return "".join(lines)
