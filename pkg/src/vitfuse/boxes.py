"""Box types and geometry shared by training, decoding, and metrics.

All boxes are axis-aligned with normalized center/size coordinates
(cx, cy, w, h) in [0, 1] unless a function name says xyxy.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DataError


@dataclass(frozen=True)
class GroundTruthBox:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def clamped(self) -> "GroundTruthBox":
        """Shrink the box so it lies inside the unit square."""
        x1 = min(max(self.cx - self.w / 2, 0.0), 1.0)
        y1 = min(max(self.cy - self.h / 2, 0.0), 1.0)
        x2 = min(max(self.cx + self.w / 2, 0.0), 1.0)
        y2 = min(max(self.cy + self.h / 2, 0.0), 1.0)
        return GroundTruthBox(
            self.class_id, (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1
        )

    def validate(self, sample: str = "?") -> None:
        if self.class_id < 0:
            raise DataError(f"sample {sample}: negative class id {self.class_id}")
        if self.w < 0 or self.h < 0:
            raise DataError(f"sample {sample}: negative box size ({self.w}, {self.h})")
        eps = 1e-6
        for field, lo, hi in (
            ("cx-w/2", self.cx - self.w / 2, None),
            ("cy-h/2", self.cy - self.h / 2, None),
            ("cx+w/2", None, self.cx + self.w / 2),
            ("cy+h/2", None, self.cy + self.h / 2),
        ):
            if lo is not None and lo < -eps:
                raise DataError(f"sample {sample}: {field} = {lo:.4f} lies below 0")
            if hi is not None and hi > 1 + eps:
                raise DataError(f"sample {sample}: {field} = {hi:.4f} lies above 1")


@dataclass(frozen=True)
class DetectionBox:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float
    confidence: float


def to_xyxy(box) -> tuple[float, float, float, float]:
    return (
        box.cx - box.w / 2,
        box.cy - box.h / 2,
        box.cx + box.w / 2,
        box.cy + box.h / 2,
    )


def iou_xyxy(a: tuple, b: tuple) -> float:
    """Intersection over union of two corner-format boxes; 0 when the union is empty."""
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(ix2 - ix1, 0.0) * max(iy2 - iy1, 0.0)
    area_a = max(a[2] - a[0], 0.0) * max(a[3] - a[1], 0.0)
    area_b = max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def box_iou(a, b) -> float:
    """IoU of two center-format boxes (GroundTruthBox or DetectionBox)."""
    return iou_xyxy(to_xyxy(a), to_xyxy(b))
