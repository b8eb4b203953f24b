"""Single-class detection evaluation: IoU, greedy matching, P/R/F1,
confidence-threshold calibration, and per-image correctness.

Matching is the usual greedy procedure: detections at or above the
confidence threshold are visited in order of decreasing confidence (ties
broken by lower detection index) and each one grabs the unmatched ground
truth box with the highest IoU, provided that IoU reaches the threshold
(ties broken by lower ground-truth index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel coordinates, corners (x_min, y_min) and
    (x_max, y_max), with x_min < x_max and y_min < y_max."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        for v in (self.x_min, self.y_min, self.x_max, self.y_max):
            if not (isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)):
                raise ValueError(f"box coordinates must be finite numbers, got {v!r}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(
                f"degenerate box [{self.x_min}, {self.y_min}, {self.x_max}, {self.y_max}]"
            )

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_list(self) -> list[float]:
        return [float(self.x_min), float(self.y_min), float(self.x_max), float(self.y_max)]


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    confidence: float
    label: int = 0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when they do not overlap."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class MatchResult:
    """pairs holds (detection_index, gt_index, iou) with indices into the
    original input sequences; detections below the confidence threshold are
    skipped entirely and do not count as false positives."""

    tp: int
    fp: int
    fn: int
    pairs: tuple[tuple[int, int, float], ...]


def match(detections, gt_boxes, tau_iou: float, tau_conf: float = 0.0) -> MatchResult:
    """Greedy confidence-ordered matching of detections to ground truth."""
    if not 0.0 < tau_iou <= 1.0:
        raise ValueError(f"tau_iou must be in (0, 1], got {tau_iou}")
    kept = [i for i, d in enumerate(detections) if d.confidence >= tau_conf]
    order = sorted(kept, key=lambda i: (-detections[i].confidence, i))
    taken = [False] * len(gt_boxes)
    pairs = []
    for i in order:
        best_j, best_iou = -1, 0.0
        for j, g in enumerate(gt_boxes):
            if taken[j]:
                continue
            v = iou(detections[i].bbox, g)
            if v >= tau_iou and v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            taken[best_j] = True
            pairs.append((i, best_j, best_iou))
    tp = len(pairs)
    return MatchResult(
        tp=tp,
        fp=len(order) - tp,
        fn=len(gt_boxes) - tp,
        pairs=tuple(pairs),
    )


def precision_recall_f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """P, R and F1 from raw counts; empty denominators give 0 by convention."""
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * tp / (2.0 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
    return precision, recall, f1


@dataclass(frozen=True)
class CalibrationResult:
    threshold: float
    f1: float
    no_detections: bool = False


def calibrate_conf_threshold(validation, tau_iou: float) -> CalibrationResult:
    """Pick the confidence threshold maximizing aggregate F1 on a validation
    set of (detections, gt_boxes) pairs.

    Candidates are the distinct detection confidences plus 0. Ties in F1
    go to the largest threshold (reject more, never less, at equal quality).
    A validation set without any detections calibrates to threshold 0 and is
    flagged so callers can warn.
    """
    validation = list(validation)
    if not validation:
        raise ValueError("validation set is empty")
    candidates = {0.0}
    for dets, _ in validation:
        candidates.update(d.confidence for d in dets)
    if candidates == {0.0} and all(not dets for dets, _ in validation):
        return CalibrationResult(threshold=0.0, f1=0.0, no_detections=True)
    best_tau, best_f1 = 0.0, -1.0
    for tau in sorted(candidates):
        tp = fp = fn = 0
        for dets, gts in validation:
            r = match(dets, gts, tau_iou, tau)
            tp, fp, fn = tp + r.tp, fp + r.fp, fn + r.fn
        f1 = precision_recall_f1(tp, fp, fn)[2]
        if f1 > best_f1 or (f1 == best_f1 and tau > best_tau):
            best_tau, best_f1 = tau, f1
    return CalibrationResult(threshold=best_tau, f1=best_f1)


def image_correct(detections, gt_boxes, tau_iou: float, tau_conf: float) -> bool:
    """An image is handled correctly when matching yields no false positives
    and no false negatives."""
    r = match(detections, gt_boxes, tau_iou, tau_conf)
    return r.fp == 0 and r.fn == 0
