"""Target assignment, composite detection loss, and the SGD training loop.

Each ground-truth box is routed to exactly one pyramid level by its size
(sqrt(w*h) against two thresholds, ties to the finer level) and assigned
to the cell containing its center. The loss is

    total = lambda_box * mean(1 - IoU(decoded, target))   over assigned cells
          + lambda_obj * BCE(objectness, assignment mask) over all cells
          + lambda_cls * BCE(class logits, one-hot)       over assigned cells

where the box decode is the one documented in the detector module, so a
prediction that decodes exactly onto its target has zero box loss.
Reported components are the weighted contributions; the total is exactly
their sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .boxes import DetectionBox, GroundTruthBox
from .core import Parameter, Tensor, autograd_off, ops
from .detector import LEVELS, DetectionModel, PyramidPrediction, decode
from .errors import ConfigError, DataError

# default size thresholds: the published 32px / 96px boundaries at a
# 640px input, expressed as fractions of the input side
T_SMALL_DEFAULT = 32.0 / 640.0
T_MED_DEFAULT = 96.0 / 640.0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 16
    lambda_box: float = 5.0
    lambda_obj: float = 1.0
    lambda_cls: float = 1.0
    seed: int = 0
    t_small: float = T_SMALL_DEFAULT
    t_med: float = T_MED_DEFAULT
    schedule: str = "constant"  # or "linear" decay to 0.1x over the run
    grad_clip: float = 10.0  # global L2 norm ceiling; <= 0 disables
    eval_every: int = 1
    stop_map50: Optional[float] = None  # early stop once val mAP@0.5 reaches this

    def __post_init__(self):
        if not (0.0 < self.t_small < self.t_med < 1.0):
            raise ConfigError(
                f"size thresholds must satisfy 0 < t_small < t_med < 1, "
                f"got {self.t_small}, {self.t_med}"
            )
        if self.schedule not in ("constant", "linear"):
            raise ConfigError(f"unknown schedule '{self.schedule}'")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "constant" or self.epochs <= 1:
            return self.learning_rate
        frac = epoch / max(self.epochs - 1, 1)
        return self.learning_rate * (1.0 - 0.9 * frac)


@dataclass
class LevelTargets:
    box: np.ndarray  # (4, S, S) normalized cx, cy, w, h
    mask: np.ndarray  # (1, S, S) objectness / assignment mask
    cls: np.ndarray  # (K, S, S) one-hot class targets


def route_level(w: float, h: float, t_small: float, t_med: float) -> int:
    """Index into LEVELS for a box of normalized size (w, h)."""
    s = float(np.sqrt(w * h))
    if s <= t_small:
        return 0
    if s <= t_med:
        return 1
    return 2


def assign_targets(
    boxes: Sequence[GroundTruthBox],
    input_size: int,
    num_classes: int,
    t_small: float = T_SMALL_DEFAULT,
    t_med: float = T_MED_DEFAULT,
    sample: str = "?",
) -> tuple[list[LevelTargets], int]:
    """Build per-level target maps for one image.

    Returns the targets for (p3, p4, p5) and the number of cell
    collisions (a later box overwriting an earlier one).
    """
    if not (0.0 < t_small < t_med < 1.0):
        raise ConfigError("invalid size thresholds")
    targets = []
    for _, stride in LEVELS:
        s = input_size // stride
        targets.append(
            LevelTargets(
                box=np.zeros((4, s, s), dtype=np.float32),
                mask=np.zeros((1, s, s), dtype=np.float32),
                cls=np.zeros((num_classes, s, s), dtype=np.float32),
            )
        )
    collisions = 0
    for gt in boxes:
        gt.validate(sample=sample)
        if gt.class_id >= num_classes:
            raise DataError(
                f"sample {sample}: class id {gt.class_id} >= num_classes {num_classes}"
            )
        idx = route_level(gt.w, gt.h, t_small, t_med)
        s = input_size // LEVELS[idx][1]
        col = min(int(gt.cx * s), s - 1)
        row = min(int(gt.cy * s), s - 1)
        level = targets[idx]
        if level.mask[0, row, col] > 0.0:
            collisions += 1
            level.cls[:, row, col] = 0.0
        level.mask[0, row, col] = 1.0
        level.box[:, row, col] = (gt.cx, gt.cy, gt.w, gt.h)
        level.cls[gt.class_id, row, col] = 1.0
    return targets, collisions


def stack_targets(per_image: Sequence[list[LevelTargets]]) -> list[LevelTargets]:
    """Stack single-image targets into batched (N, ., S, S) maps."""
    out = []
    for lvl in range(len(LEVELS)):
        out.append(
            LevelTargets(
                box=np.stack([t[lvl].box for t in per_image]),
                mask=np.stack([t[lvl].mask for t in per_image]),
                cls=np.stack([t[lvl].cls for t in per_image]),
            )
        )
    return out


@dataclass
class LossBreakdown:
    box: float
    obj: float
    cls: float

    @property
    def total(self) -> float:
        return self.box + self.obj + self.cls


def _decoded_box_maps(level: Tensor, stride: int, input_size: int):
    """Differentiable decode of the 4 box channels into corner maps."""
    n, _, s, _ = level.data.shape
    cols = Tensor(np.broadcast_to(np.arange(s, dtype=np.float32), (1, 1, s, s)).copy())
    rows = Tensor(
        np.broadcast_to(np.arange(s, dtype=np.float32).reshape(s, 1), (1, 1, s, s)).copy()
    )
    sx = ops.sigmoid(ops.narrow(level, 1, 0, 1))
    sy = ops.sigmoid(ops.narrow(level, 1, 1, 1))
    sw = ops.sigmoid(ops.narrow(level, 1, 2, 1))
    sh = ops.sigmoid(ops.narrow(level, 1, 3, 1))
    cx = ops.mul(ops.add(cols, sx), 1.0 / s)
    cy = ops.mul(ops.add(rows, sy), 1.0 / s)
    scale = float(stride) / float(input_size)
    w = ops.mul(ops.mul(ops.mul(sw, sw), 4.0), scale)
    h = ops.mul(ops.mul(ops.mul(sh, sh), 4.0), scale)
    half_w = ops.mul(w, 0.5)
    half_h = ops.mul(h, 0.5)
    return (
        ops.sub(cx, half_w),
        ops.sub(cy, half_h),
        ops.add(cx, half_w),
        ops.add(cy, half_h),
        ops.mul(w, h),
    )


def _iou_maps(pred, target):
    px1, py1, px2, py2, parea = pred
    tx1, ty1, tx2, ty2, tarea = target
    iw = ops.maximum(ops.sub(ops.minimum(px2, tx2), ops.maximum(px1, tx1)), 0.0)
    ih = ops.maximum(ops.sub(ops.minimum(py2, ty2), ops.maximum(py1, ty1)), 0.0)
    inter = ops.mul(iw, ih)
    union = ops.add(ops.sub(ops.add(parea, tarea), inter), 1e-9)
    return ops.div(inter, union)


def detection_loss(
    preds: PyramidPrediction,
    targets: Sequence[LevelTargets],
    config: TrainConfig,
    input_size: int,
) -> tuple[Tensor, LossBreakdown]:
    """Composite loss over a batch; see the module docstring for the formula."""
    box_sum = None
    obj_sum = None
    cls_sum = None
    assigned = 0.0
    total_cells = 0.0

    for (name, stride, level), tgt in zip(preds.levels(), targets):
        n, ch, s, _ = level.data.shape
        k = ch - 5
        mask = Tensor(tgt.mask)
        n_assigned = float(tgt.mask.sum())
        assigned += n_assigned
        total_cells += float(n * s * s)

        obj_logits = ops.narrow(level, 1, 4, 1)
        obj_bce = ops.sum_(ops.bce_with_logits(obj_logits, tgt.mask))
        obj_sum = obj_bce if obj_sum is None else ops.add(obj_sum, obj_bce)

        if n_assigned > 0:
            pred_maps = _decoded_box_maps(level, stride, input_size)
            tb = tgt.box
            tx1 = Tensor(tb[:, 0:1] - tb[:, 2:3] / 2)
            ty1 = Tensor(tb[:, 1:2] - tb[:, 3:4] / 2)
            tx2 = Tensor(tb[:, 0:1] + tb[:, 2:3] / 2)
            ty2 = Tensor(tb[:, 1:2] + tb[:, 3:4] / 2)
            tarea = Tensor(tb[:, 2:3] * tb[:, 3:4])
            iou = _iou_maps(pred_maps, (tx1, ty1, tx2, ty2, tarea))
            box_cells = ops.mul(ops.sub(1.0, iou), mask)
            lvl_box = ops.sum_(box_cells)
            box_sum = lvl_box if box_sum is None else ops.add(box_sum, lvl_box)

            cls_logits = ops.narrow(level, 1, 5, k)
            cls_cells = ops.mul(ops.bce_with_logits(cls_logits, tgt.cls), mask)
            lvl_cls = ops.sum_(cls_cells)
            cls_sum = lvl_cls if cls_sum is None else ops.add(cls_sum, lvl_cls)

    zero = Tensor(np.zeros((), dtype=np.float32))
    box_term = (
        ops.mul(box_sum, config.lambda_box / assigned) if box_sum is not None else zero
    )
    obj_term = ops.mul(obj_sum, config.lambda_obj / total_cells)
    k = preds.p3.data.shape[1] - 5
    cls_term = (
        ops.mul(cls_sum, config.lambda_cls / (assigned * k))
        if cls_sum is not None
        else zero
    )
    total = ops.add(ops.add(box_term, obj_term), cls_term)
    breakdown = LossBreakdown(
        box=float(box_term.data),
        obj=float(obj_term.data),
        cls=float(cls_term.data),
    )
    return total, breakdown


class SGD:
    """Momentum SGD over the trainable parameters only."""

    def __init__(self, params: Iterable[Parameter], lr: float, momentum: float = 0.9):
        self.params = [p for p in params if not p.frozen]
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.tensor.grad is None:
                continue
            v *= self.momentum
            v += p.tensor.grad
            p.data[...] -= (self.lr * v).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None

    def clip_gradients(self, max_norm: float) -> float:
        """Scale all gradients so their global L2 norm stays under max_norm."""
        total = 0.0
        for p in self.params:
            if p.tensor.grad is not None:
                total += float(np.sum(p.tensor.grad.astype(np.float64) ** 2))
        norm = float(np.sqrt(total))
        if max_norm > 0.0 and norm > max_norm:
            scale = max_norm / (norm + 1e-12)
            for p in self.params:
                if p.tensor.grad is not None:
                    p.tensor.grad *= np.asarray(scale, dtype=p.tensor.grad.dtype)
        return norm


@dataclass
class Dataset:
    """In-memory detection dataset: float32 images in [0,1] and box labels."""

    images: np.ndarray  # (N, 3, H, W)
    labels: list[list[GroundTruthBox]]
    regenerated: int = 0

    def __len__(self) -> int:
        return int(self.images.shape[0])


@dataclass
class EpochRecord:
    epoch: int
    box: float
    obj: float
    cls: float
    total: float
    map50: Optional[float] = None

    def as_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "box": self.box,
            "obj": self.obj,
            "cls": self.cls,
            "total": self.total,
            "map50": self.map50,
        }


def evaluate_detector(
    model: DetectionModel,
    dataset: Dataset,
    conf_threshold: float = 0.05,
    nms_iou: float = 0.5,
    batch_size: int = 16,
):
    """Decode + NMS the model over a dataset and score mAP against its labels."""
    from .evaluation import map_at, nms

    preds_by_image: list[list[DetectionBox]] = []
    with autograd_off():
        for start in range(0, len(dataset), batch_size):
            batch = Tensor(dataset.images[start : start + batch_size])
            raw = model(batch)
            for boxes in decode(raw, conf_threshold, model.config.input_size):
                preds_by_image.append(nms(boxes, nms_iou))
    return map_at(preds_by_image, dataset.labels)


def train(
    model: DetectionModel,
    train_set: Dataset,
    config: TrainConfig,
    val_set: Optional[Dataset] = None,
) -> list[EpochRecord]:
    """Run seeded mini-batch SGD; returns one record per epoch.

    Frozen parameters are never updated and their gradient buffers are
    asserted absent after every step. Aborts with a diagnostic on a
    non-finite loss.
    """
    if len(train_set) == 0:
        raise ConfigError("train(): dataset is empty")
    n = len(train_set)
    input_size = model.config.input_size
    k = model.config.num_classes

    per_image = [
        assign_targets(
            labels, input_size, k, config.t_small, config.t_med, sample=str(i)
        )[0]
        for i, labels in enumerate(train_set.labels)
    ]

    optimizer = SGD(model.parameters(), config.learning_rate, config.momentum)
    frozen_params = [p for p in model.parameters() if p.frozen]
    rng = np.random.default_rng(config.seed)
    history: list[EpochRecord] = []

    for epoch in range(config.epochs):
        optimizer.lr = config.lr_at(epoch)
        order = rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            images = Tensor(train_set.images[idx])
            targets = stack_targets([per_image[i] for i in idx])
            preds = model(images)
            loss, parts = detection_loss(preds, targets, config, input_size)
            if not np.isfinite(loss.data):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} batch {batches}: "
                    f"box={parts.box} obj={parts.obj} cls={parts.cls}"
                )
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip > 0.0:
                optimizer.clip_gradients(config.grad_clip)
            optimizer.step()
            for p in frozen_params:
                assert p.tensor.grad is None, f"frozen {p.name} accumulated gradient"
            sums += (parts.box, parts.obj, parts.cls)
            batches += 1

        record = EpochRecord(
            epoch=epoch,
            box=float(sums[0] / batches),
            obj=float(sums[1] / batches),
            cls=float(sums[2] / batches),
            total=float(sums.sum() / batches),
        )
        if val_set is not None and (epoch + 1) % config.eval_every == 0:
            metrics = evaluate_detector(model, val_set)
            record.map50 = metrics.map50 if metrics is not None else None
        history.append(record)
        if (
            config.stop_map50 is not None
            and record.map50 is not None
            and record.map50 >= config.stop_map50
        ):
            break
    return history
