"""Pixel and object metrics for trip-hazard segmentation, PR sweeps and fold averaging.

Conventions for empty denominators (a frame set with no trip pixels and no
trip predictions is a perfect result):

* precision = tp / (tp + fp); when tp + fp = 0 it is 1 if fn = 0 else 0
* recall    = tp / (tp + fn); when tp + fn = 0 it is 1 (nothing to miss),
  which keeps recall non-increasing along a threshold sweep
* f1        = 2tp / (2tp + fp + fn); 1 when all three counts are 0
* trip IOU  = tp / (tp + fp + fn); 1 when all three counts are 0

With these, f1 = 2 iou / (1 + iou) holds for every report built from one set
of counts. Counts are pooled over frames within a fold (micro average) and
metrics are averaged over folds (macro average).
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

DEFAULT_THETA = 0.5
DEFAULT_THRESHOLDS = tuple(round(i / 100, 2) for i in range(101))
CURVE_COLUMNS = ("threshold", "precision", "recall", "f1", "trip_iou", "obj_det")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return asdict(self)


def _as_mask(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-D mask, got shape {a.shape}")
    return a.astype(bool)


def confusion(pred, gt, ignore=None) -> ConfusionCounts:
    """Count trip (positive) / non-trip pixels over the non-ignored region."""
    pred, gt = _as_mask(pred, "pred"), _as_mask(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    keep = np.ones_like(gt) if ignore is None else ~_as_mask(ignore, "ignore")
    if keep.shape != gt.shape:
        raise ValueError(f"ignore mask {keep.shape} vs ground truth {gt.shape}")
    p, g = pred[keep], gt[keep]
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def _ratio(num: int, den: int, empty: float) -> float:
    return num / den if den else empty


@dataclass
class ObjectRecord:
    index: int
    pixels: int
    detected_pixels: int
    detected: bool

    @property
    def fraction(self) -> float:
        return self.detected_pixels / self.pixels


@dataclass
class ObjectDetection:
    detected: int
    total: int
    theta: float = DEFAULT_THETA
    records: list = field(default_factory=list)

    @property
    def fraction(self) -> float | None:
        return self.detected / self.total if self.total else None

    def __add__(self, other: "ObjectDetection") -> "ObjectDetection":
        return ObjectDetection(self.detected + other.detected, self.total + other.total, self.theta,
                               self.records + other.records)


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    trip_iou: float
    trip_obj_detection: float | None
    threshold: float | None
    counts: ConfusionCounts
    objects_detected: int = 0
    objects_total: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = self.counts.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["counts"] = ConfusionCounts(**d["counts"])
        return cls(**d)


def metrics(counts: ConfusionCounts, objects: ObjectDetection | None = None,
            threshold: float | None = None) -> MetricsReport:
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    perfect = 1.0 if tp + fp + fn == 0 else 0.0
    precision = _ratio(tp, tp + fp, 1.0 if fn == 0 else 0.0)
    recall = _ratio(tp, tp + fn, 1.0)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn, perfect)
    iou = _ratio(tp, tp + fp + fn, perfect)
    det, tot = (objects.detected, objects.total) if objects else (0, 0)
    return MetricsReport(precision, recall, f1, iou, objects.fraction if objects else None, threshold, counts,
                         det, tot)


def gt_components(gt) -> list:
    """Split a mask into 8-connected components, ordered by label."""
    labels, n = ndimage.label(_as_mask(gt, "gt"), structure=np.ones((3, 3), dtype=int))
    return [labels == i for i in range(1, n + 1)]


def _object_masks(objects, shape, ignore=None) -> list:
    if objects is None:
        raise ValueError("ground-truth objects are required")
    if isinstance(objects, np.ndarray) and objects.ndim == 2:
        masks = gt_components(objects)
    else:
        masks = [_as_mask(m, "object") for m in objects]
    for m in masks:
        if m.shape != tuple(shape):
            raise ValueError(f"object mask {m.shape} vs prediction {tuple(shape)}")
    if ignore is not None:
        keep = ~_as_mask(ignore, "ignore")
        masks = [m & keep for m in masks]
    return [m for m in masks if m.any()]


def trip_object_detection(pred, objects, theta: float = DEFAULT_THETA, ignore=None) -> ObjectDetection:
    """Fraction of ground-truth objects whose predicted-trip coverage is at least ``theta``.

    ``objects`` is a list of per-instance masks (polygon instances) or a single
    mask, which is split into 8-connected components.
    """
    pred = _as_mask(pred, "pred")
    records = []
    for i, m in enumerate(_object_masks(objects, pred.shape, ignore)):
        n = int(np.count_nonzero(m))
        hit = int(np.count_nonzero(pred & m))
        records.append(ObjectRecord(i, n, hit, hit >= theta * n))
    return ObjectDetection(sum(r.detected for r in records), len(records), theta, records)


@dataclass
class EvalFrame:
    """Trip probabilities and ground truth for one frame."""

    probability: np.ndarray
    gt: np.ndarray
    objects: list | None = None  # per-instance masks; None -> components of gt
    ignore: np.ndarray | None = None
    key: str = ""

    @classmethod
    def from_prediction(cls, prediction, frame, ignore=None) -> "EvalFrame":
        objs = frame.objects() if frame.polygons else None
        return cls(prediction.trip_probability, frame.trip_mask(), objs, ignore, frame.key)


def _count_at_least(sorted_vals: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    return sorted_vals.size - np.searchsorted(sorted_vals, thresholds, side="left")


def _check_thresholds(thresholds) -> np.ndarray:
    t = np.asarray(DEFAULT_THRESHOLDS if thresholds is None else thresholds, dtype=np.float64)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("threshold grid must be a nonempty 1-D sequence")
    if np.any(np.diff(t) <= 0):
        raise ValueError("threshold grid must be strictly increasing")
    return t


def pr_sweep(frames, thresholds=None, theta: float = DEFAULT_THETA) -> list:
    """One micro-averaged MetricsReport per threshold; a pixel is trip when p >= threshold."""
    frames = list(frames)
    if not frames:
        raise ValueError("pr_sweep needs at least one frame")
    t = _check_thresholds(thresholds)
    tp = np.zeros(t.size, dtype=np.int64)
    fp = np.zeros_like(tp)
    n_kept = 0
    n_pos = 0
    obj_hits = np.zeros_like(tp)
    n_obj = 0
    for f in frames:
        prob = np.asarray(f.probability, dtype=np.float64)
        gt = _as_mask(f.gt, "gt")
        if prob.shape != gt.shape:
            raise ValueError(f"{f.key}: probabilities {prob.shape} vs ground truth {gt.shape}")
        keep = np.ones_like(gt) if f.ignore is None else ~_as_mask(f.ignore, "ignore")
        pos = np.sort(prob[keep & gt])
        neg = np.sort(prob[keep & ~gt])
        tp += _count_at_least(pos, t)
        fp += _count_at_least(neg, t)
        n_pos += pos.size
        n_kept += pos.size + neg.size
        objs = _object_masks(gt if f.objects is None else f.objects, gt.shape, f.ignore)
        for m in objs:
            vals = np.sort(prob[m])
            obj_hits += _count_at_least(vals, t) >= theta * vals.size
        n_obj += len(objs)
    curve = []
    for i, tau in enumerate(t):
        fn = n_pos - int(tp[i])
        counts = ConfusionCounts(int(tp[i]), int(fp[i]), fn, n_kept - int(tp[i]) - int(fp[i]) - fn)
        curve.append(metrics(counts, ObjectDetection(int(obj_hits[i]), n_obj, theta), float(tau)))
    return curve


def operating_point(curve) -> MetricsReport:
    """The highest-F1 point; among equal F1 values the lowest threshold wins."""
    curve = list(curve)
    if not curve:
        raise ValueError("empty curve")
    best = None
    for point in sorted(curve, key=lambda p: p.threshold):
        if best is None or point.f1 > best.f1:
            best = point
    return best


@dataclass
class AveragedReport:
    """Unweighted mean of per-fold metrics.

    The mean F1 is not recomputed from the mean precision and recall, so it
    generally differs from their harmonic mean.
    """

    precision: float
    recall: float
    f1: float
    trip_iou: float
    trip_obj_detection: float | None
    n_folds: int
    thresholds: list

    def to_dict(self) -> dict:
        return asdict(self)


def crossval_aggregate(reports) -> AveragedReport:
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one fold report")

    def mean(vals):
        # fsum is correctly rounded, so fold order cannot change the result
        return math.fsum(vals) / len(vals)

    det = [r.trip_obj_detection for r in reports if r.trip_obj_detection is not None]
    return AveragedReport(
        mean([r.precision for r in reports]), mean([r.recall for r in reports]), mean([r.f1 for r in reports]),
        mean([r.trip_iou for r in reports]), mean(det) if det else None, len(reports),
        [r.threshold for r in reports])


def evaluate_masks(pred_masks, frames, theta: float = DEFAULT_THETA) -> MetricsReport:
    """Metrics of fixed binary predictions, pooled over frames."""
    counts = ConfusionCounts()
    objects = ObjectDetection(0, 0, theta)
    for pred, f in zip(pred_masks, frames, strict=True):
        counts = counts + confusion(pred, f.gt, f.ignore)
        objs = f.gt if f.objects is None else f.objects
        objects = objects + trip_object_detection(pred, objs, theta, f.ignore)
    return metrics(counts, objects)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def curve_rows(curve) -> list:
    return [[_fmt(p.threshold), _fmt(p.precision), _fmt(p.recall), _fmt(p.f1), _fmt(p.trip_iou),
             _fmt(p.trip_obj_detection)] for p in curve]


def curve_csv(curve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    w.writerows(curve_rows(curve))
    return buf.getvalue()


def write_curve(curve, path) -> Path:
    """Write a curve as CSV, plus JSON next to it with the same stem."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".csv").write_text(curve_csv(curve))
    doc = {"schema": "hazardfuse.curve/1", "points": [p.to_dict() for p in curve]}
    path.with_suffix(".json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path.with_suffix(".csv")


def write_report(report, path, config: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"schema": "hazardfuse.report/1", "report": report.to_dict(), "config": config or {}}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path
