"""Detection metrics: IoU, NMS, average precision, mAP, latency/FPS.

AP uses confidence-sorted greedy matching (each ground truth matched at
most once, to the highest-confidence prediction with IoU at or above the
threshold) and the area under the all-point interpolated precision-recall
curve. Classes absent from the ground truth are excluded from the mAP
mean rather than scored zero.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .boxes import DetectionBox, GroundTruthBox, box_iou, iou_xyxy, to_xyxy
from .core import Tensor, autograd_off
from .errors import ConfigError

# the standard 0.50:0.05:0.95 threshold ladder
MAP_THRESHOLDS: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def iou(a, b) -> float:
    """IoU of two center-format boxes (any objects with cx/cy/w/h fields)."""
    return box_iou(a, b)


def nms(boxes: Sequence[DetectionBox], iou_threshold: float) -> list[DetectionBox]:
    """Greedy per-class suppression; ties in confidence keep the earlier box.

    Output is sorted by descending confidence; no two surviving same-class
    boxes overlap at or above the threshold.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ConfigError(f"nms threshold must lie in [0,1], got {iou_threshold}")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].confidence, i))
    keep: list[DetectionBox] = []
    suppressed = set()
    for i in order:
        if i in suppressed:
            continue
        keep.append(boxes[i])
        for j in order:
            if j == i or j in suppressed:
                continue
            if boxes[j].class_id == boxes[i].class_id and box_iou(boxes[i], boxes[j]) >= iou_threshold:
                suppressed.add(j)
    return keep


def _match_flags(
    preds: list[tuple[int, DetectionBox]],
    gts_by_image: dict[int, list[GroundTruthBox]],
    iou_threshold: float,
) -> list[bool]:
    """Greedy TP/FP flags for confidence-ordered (image, box) predictions."""
    matched: dict[int, set[int]] = {img: set() for img in gts_by_image}
    flags = []
    for img, pred in preds:
        gts = gts_by_image.get(img, [])
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if j in matched.get(img, set()):
                continue
            v = box_iou(pred, gt)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched[img].add(best_j)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _ap_from_flags(flags: Sequence[bool], num_gt: int) -> float:
    """Area under the all-point interpolated PR curve."""
    if num_gt == 0:
        return 0.0
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    ranks = np.arange(1, len(flags) + 1, dtype=np.float64)
    precision = tp / ranks
    recall = tp / num_gt
    # monotone envelope from the right, then integrate over recall steps
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    area = 0.0
    for p, r in zip(envelope, recall):
        if r > prev_r:
            area += (r - prev_r) * p
            prev_r = r
    return float(area)


def average_precision(
    preds_by_image: Sequence[Sequence[DetectionBox]],
    gts_by_image: Sequence[Sequence[GroundTruthBox]],
    iou_threshold: float,
) -> float:
    """Single-class AP over aligned per-image prediction/ground-truth lists.

    Ties in confidence are broken by (image index, original list order),
    which fixes the ranking the metric is computed over.
    """
    flat: list[tuple[int, DetectionBox]] = []
    for img, boxes in enumerate(preds_by_image):
        for box in boxes:
            flat.append((img, box))
    flat.sort(key=lambda item: -item[1].confidence)
    gts = {img: list(g) for img, g in enumerate(gts_by_image)}
    num_gt = sum(len(g) for g in gts.values())
    flags = _match_flags(flat, gts, iou_threshold)
    return _ap_from_flags(flags, num_gt)


@dataclass(frozen=True)
class DetectionMetrics:
    map50: float
    map50_95: float
    per_class: dict[int, float]  # AP at IoU 0.5 per class present in GT


def map_at(
    preds_by_image: Sequence[Sequence[DetectionBox]],
    gts_by_image: Sequence[Sequence[GroundTruthBox]],
    iou_thresholds: Sequence[float] = MAP_THRESHOLDS,
) -> Optional[DetectionMetrics]:
    """Mean AP over classes present in GT, then over thresholds.

    Returns None when the ground truth is empty overall (the metric is
    undefined, never reported as 0).
    """
    if not iou_thresholds:
        raise ConfigError("map_at: iou_thresholds must be nonempty")
    classes = sorted({gt.class_id for gts in gts_by_image for gt in gts})
    if not classes:
        return None

    def class_ap(class_id: int, threshold: float) -> float:
        preds = [[b for b in boxes if b.class_id == class_id] for boxes in preds_by_image]
        gts = [[g for g in boxes if g.class_id == class_id] for boxes in gts_by_image]
        return average_precision(preds, gts, threshold)

    per_class_50 = {c: class_ap(c, 0.5) for c in classes}
    per_threshold = [
        float(np.mean([class_ap(c, t) for c in classes])) for t in iou_thresholds
    ]
    return DetectionMetrics(
        map50=float(np.mean(list(per_class_50.values()))),
        map50_95=float(np.mean(per_threshold)),
        per_class=per_class_50,
    )


# ----------------------------------------------------------------------
# latency


def fps_from_ms(mean_ms: float) -> float:
    """Convert a mean per-forward latency to frames per second."""
    return 1000.0 / mean_ms


@dataclass(frozen=True)
class LatencyReport:
    warmup: int
    runs: int
    mean_ms: float
    std_ms: float

    @property
    def fps(self) -> float:
        return fps_from_ms(self.mean_ms)


def latency_bench(
    model, input_size: int, warmup: int = 5, runs: int = 30, seed: int = 0
) -> LatencyReport:
    """Serially timed single-image forwards; warmup passes are discarded."""
    if runs < 3:
        raise ConfigError(f"latency_bench needs runs >= 3, got {runs}")
    rng = np.random.default_rng(seed)
    image = Tensor(rng.random((1, 3, input_size, input_size)).astype(np.float32))
    samples = []
    with autograd_off():
        for _ in range(warmup):
            model(image)
        for _ in range(runs):
            start = time.perf_counter()
            model(image)
            samples.append((time.perf_counter() - start) * 1000.0)
    return LatencyReport(
        warmup=warmup,
        runs=runs,
        mean_ms=statistics.fmean(samples),
        std_ms=statistics.stdev(samples) if len(samples) > 1 else 0.0,
    )
