"""Scaled convolutional detector with injector mounting points.

Topology per scale (base width w0):

    stem     2x2 s2 conv, 3 -> w0
    stage4   2x2 s2 conv, w0 -> 2*w0, residual blocks
    stage8   2x2 s2 conv, 2*w0 -> 4*w0, blocks, then a 3x3 widening conv
             4*w0 -> 8*w0 at stride 8, blocks        -> P3 tap
    stage16  2x2 s2 conv, 8*w0 -> 8*w0, blocks       -> P4 tap
    stage32  2x2 s2 conv, 8*w0 -> 8*w0, blocks       -> P5 tap

so the full-size L ladder runs 64 -> 128 -> 256 early with 512-channel
features at the stride-8 injection site. A PAN-style neck (top-down then
bottom-up, uniform 8*w0 channels) feeds three anchor-free heads. Heads
emit (4 box terms, 1 objectness logit, K class logits) per cell.

Box decode, shared verbatim by training and inference:

    cx = (col + sigmoid(tx)) / S          S = cells per side
    cy = (row + sigmoid(ty)) / S
    w  = (2 * sigmoid(tw))^2 * stride / input_size
    h  = (2 * sigmoid(th))^2 * stride / input_size
    confidence = sigmoid(obj) * max_k sigmoid(cls_k)

Downsampling convs use even 2x2 kernels so every output extent divides
exactly (the conv contract rejects fractional extents).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .boxes import DetectionBox
from .core import Conv2d, Module, ModuleList, Tensor, assign_parameter_names, ops
from .core.ops import _stable_sigmoid
from .errors import ConfigError, ShapeError
from .injection import (
    FeatureInjector,
    InputInjector,
    IntegrationStrategy,
    Site,
    plan_injections,
    site_grid_side,
)
from .teacher import (
    TEACHER_SHORT_NAMES,
    TeacherSpec,
    VisionTeacher,
    count_teacher_params,
    teacher_spec,
)

LEVELS: tuple[tuple[str, int], ...] = (("p3", 8), ("p4", 16), ("p5", 32))
OBJ_BIAS_INIT = -4.0  # low objectness prior speeds early training

# fixed per-component seeding keys, so non-injector weights are identical
# across strategies built from the same seed
_COMPONENT_KEYS = {
    "backbone": 0,
    "neck": 1,
    "heads": 2,
    "p0_teacher": 10,
    "p0_injector": 11,
    "p3_teacher": 20,
    "p3_injector": 21,
    "p4_teacher": 30,
    "p4_injector": 31,
}


def component_rng(seed: int, component: str) -> np.random.Generator:
    key = _COMPONENT_KEYS[component]
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))


@dataclass(frozen=True)
class ScaleSpec:
    """Detector scale: base width and residual blocks per stage."""

    name: str
    width_base: int
    blocks_per_stage: int

    @property
    def stem_channels(self) -> int:
        return self.width_base

    @property
    def stage4_channels(self) -> int:
        return 2 * self.width_base

    @property
    def stage8_channels(self) -> int:
        return 4 * self.width_base

    @property
    def p3_channels(self) -> int:
        return 8 * self.width_base

    @property
    def p4_channels(self) -> int:
        return 8 * self.width_base

    @property
    def p5_channels(self) -> int:
        return 8 * self.width_base


SCALE_PRESETS = {
    "s": ScaleSpec("s", 16, 1),
    "m": ScaleSpec("m", 24, 2),
    "l": ScaleSpec("l", 32, 2),
    # paper-size geometry; used for accounting and channel-ladder checks
    "l-full": ScaleSpec("l-full", 64, 2),
}


def scale_spec(name: str) -> ScaleSpec:
    try:
        return SCALE_PRESETS[name.lower()]
    except KeyError:
        known = ", ".join(sorted(SCALE_PRESETS))
        raise ConfigError(f"unknown scale '{name}' (known: {known})") from None


@dataclass(frozen=True)
class ModelConfig:
    scale: str = "s"
    teacher: str = "toy-tiny"
    strategy: str = "none"
    num_classes: int = 2
    input_size: int = 64
    seed: int = 0
    p0_replace: bool = False
    share_teachers: bool = False

    def __post_init__(self):
        scale_spec(self.scale)
        strategy = IntegrationStrategy.parse(self.strategy)
        object.__setattr__(self, "strategy", strategy.value)
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.input_size % 32:
            raise ConfigError(
                f"input_size {self.input_size} must be divisible by 32"
            )
        sites = plan_injections(strategy)
        if sites:
            spec = teacher_spec(self.teacher)
            if Site.P0 in sites and self.input_size % spec.patch_size:
                raise ConfigError(
                    f"input_size {self.input_size} must be divisible by the "
                    f"teacher patch size {spec.patch_size} when P0 is injected"
                )

    @property
    def strategy_enum(self) -> IntegrationStrategy:
        return IntegrationStrategy.parse(self.strategy)

    @property
    def name(self) -> str:
        """Rendered "[Scale]-[Teacher]-[Strategy]" configuration name."""
        if self.strategy_enum is IntegrationStrategy.NONE:
            return f"{self.scale.upper()}-baseline"
        short = TEACHER_SHORT_NAMES.get(self.teacher, self.teacher)
        return f"{self.scale.upper()}-{short}-{self.strategy}"

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "teacher": self.teacher,
            "strategy": self.strategy,
            "num_classes": self.num_classes,
            "input_size": self.input_size,
            "seed": self.seed,
            "p0_replace": self.p0_replace,
            "share_teachers": self.share_teachers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class ParamReport:
    total: int
    trainable: int
    frozen: int
    trainable_fraction: float

    @classmethod
    def build(cls, total: int, trainable: int, frozen: int) -> "ParamReport":
        if total != trainable + frozen:
            raise ConfigError(
                f"parameter accounting broken: {total} != {trainable} + {frozen}"
            )
        return cls(total, trainable, frozen, trainable / total if total else 0.0)


@dataclass
class PyramidPrediction:
    """Per-level raw head outputs: (N, 4+1+K, S, S) with S = input/stride."""

    p3: Tensor
    p4: Tensor
    p5: Tensor

    def levels(self):
        yield ("p3", 8, self.p3)
        yield ("p4", 16, self.p4)
        yield ("p5", 32, self.p5)


# ----------------------------------------------------------------------
# building blocks


class ConvAct(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=0, init_std=None):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, padding=padding, init_std=init_std)

    def forward(self, x):
        return ops.silu(self.conv(x))


class ResidualBlock(Module):
    """x + conv(silu(conv(x))); the closing conv starts at zero so the
    block is the identity at initialization (keeps deep stacks trainable
    without normalization layers)."""

    def __init__(self, channels, rng):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1)
        self.conv2.weight.data[...] = 0.0

    def forward(self, x):
        return ops.add(x, self.conv2(ops.silu(self.conv1(x))))


class Stage(Module):
    """Optional 2x2 stride-2 downsample followed by residual blocks."""

    def __init__(self, cin, cout, blocks, rng, downsample=True):
        super().__init__()
        if downsample:
            self.entry = ConvAct(cin, cout, 2, rng, stride=2)
        else:
            self.entry = ConvAct(cin, cout, 3, rng, padding=1)
        self.blocks = ModuleList(ResidualBlock(cout, rng) for _ in range(blocks))

    def forward(self, x):
        x = self.entry(x)
        for block in self.blocks:
            x = block(x)
        return x


class Backbone(Module):
    def __init__(self, scale: ScaleSpec, rng):
        super().__init__()
        b = scale.blocks_per_stage
        self.stem = ConvAct(3, scale.stem_channels, 2, rng, stride=2)
        self.stage4 = Stage(scale.stem_channels, scale.stage4_channels, b, rng)
        self.stage8 = Stage(scale.stage4_channels, scale.stage8_channels, b, rng)
        self.widen8 = Stage(scale.stage8_channels, scale.p3_channels, b, rng, downsample=False)
        self.stage16 = Stage(scale.p3_channels, scale.p4_channels, b, rng)
        self.stage32 = Stage(scale.p4_channels, scale.p5_channels, b, rng)


class Neck(Module):
    """Top-down then bottom-up aggregation at uniform channel width."""

    def __init__(self, channels, rng):
        super().__init__()
        c = channels
        self.fuse_td4 = ConvAct(2 * c, c, 3, rng, padding=1)
        self.fuse_td3 = ConvAct(2 * c, c, 3, rng, padding=1)
        self.down3 = ConvAct(c, c, 2, rng, stride=2)
        self.fuse_bu4 = ConvAct(2 * c, c, 3, rng, padding=1)
        self.down4 = ConvAct(c, c, 2, rng, stride=2)
        self.fuse_bu5 = ConvAct(2 * c, c, 3, rng, padding=1)

    def forward(self, p3, p4, p5):
        td4 = self.fuse_td4(ops.concat([ops.upsample_nearest(p5, 2), p4], axis=1))
        o3 = self.fuse_td3(ops.concat([ops.upsample_nearest(td4, 2), p3], axis=1))
        o4 = self.fuse_bu4(ops.concat([self.down3(o3), td4], axis=1))
        o5 = self.fuse_bu5(ops.concat([self.down4(o4), p5], axis=1))
        return o3, o4, o5


class Head(Module):
    def __init__(self, channels, num_classes, rng):
        super().__init__()
        self.stem = ConvAct(channels, channels, 3, rng, padding=1)
        self.out = Conv2d(channels, 5 + num_classes, 1, rng, init_std=0.01)
        self.out.bias.data[4] = OBJ_BIAS_INIT

    def forward(self, x):
        return self.out(self.stem(x))


# ----------------------------------------------------------------------
# the model


def teacher_plan(config: ModelConfig) -> dict[Site, TeacherSpec]:
    """Resolve the teacher spec (with site grid) for every injected site."""
    sites = plan_injections(config.strategy_enum)
    if not sites:
        return {}
    base = teacher_spec(config.teacher)
    plan = {}
    for site in sorted(sites, key=lambda s: s.value):
        grid = site_grid_side(site, config.input_size, base.patch_size)
        plan[site] = base.with_grid(grid)
    return plan


class DetectionModel(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.scale = scale_spec(config.scale)
        self.backbone = Backbone(self.scale, component_rng(config.seed, "backbone"))
        self.neck = Neck(self.scale.p3_channels, component_rng(config.seed, "neck"))
        rng_heads = component_rng(config.seed, "heads")
        self.head3 = Head(self.scale.p3_channels, config.num_classes, rng_heads)
        self.head4 = Head(self.scale.p4_channels, config.num_classes, rng_heads)
        self.head5 = Head(self.scale.p5_channels, config.num_classes, rng_heads)

        plan = teacher_plan(config)
        teachers: dict[int, VisionTeacher] = {}

        def site_teacher(site: Site) -> VisionTeacher:
            spec = plan[site]
            if config.share_teachers and spec.grid_side in teachers:
                return teachers[spec.grid_side]
            t = VisionTeacher(
                spec, rng=component_rng(config.seed, f"{site.value}_teacher")
            )
            teachers[spec.grid_side] = t
            return t

        self.p0_injector: Optional[InputInjector] = None
        self.p3_injector: Optional[FeatureInjector] = None
        self.p4_injector: Optional[FeatureInjector] = None
        if Site.P0 in plan:
            self.p0_injector = InputInjector(
                site_teacher(Site.P0),
                component_rng(config.seed, "p0_injector"),
                replace_input=config.p0_replace,
            )
        if Site.P3 in plan:
            self.p3_injector = FeatureInjector(
                self.scale.p3_channels,
                plan[Site.P3].grid_side,
                site_teacher(Site.P3),
                component_rng(config.seed, "p3_injector"),
            )
        if Site.P4 in plan:
            self.p4_injector = FeatureInjector(
                self.scale.p4_channels,
                plan[Site.P4].grid_side,
                site_teacher(Site.P4),
                component_rng(config.seed, "p4_injector"),
            )

    def forward(self, images: Tensor, taps: Optional[dict] = None) -> PyramidPrediction:
        n, c, h, w = images.data.shape
        if c != 3 or h != self.config.input_size or w != self.config.input_size:
            raise ShapeError(
                f"model built for (N,3,{self.config.input_size},{self.config.input_size}) "
                f"inputs, got {images.data.shape}"
            )
        x = images
        if self.p0_injector is not None:
            x = self.p0_injector(x)
        if taps is not None:
            taps["p0-out"] = x
        bb = self.backbone
        x = bb.widen8(bb.stage8(bb.stage4(bb.stem(x))))
        if taps is not None:
            taps["p3-pre"] = x
        p3 = self.p3_injector(x) if self.p3_injector is not None else x
        if taps is not None:
            taps["p3-post"] = p3
        p4 = bb.stage16(p3)
        if self.p4_injector is not None:
            p4 = self.p4_injector(p4)
        if taps is not None:
            taps["p4"] = p4
        p5 = bb.stage32(p4)
        if taps is not None:
            taps["p5"] = p5
        o3, o4, o5 = self.neck(p3, p4, p5)
        return PyramidPrediction(self.head3(o3), self.head4(o4), self.head5(o5))

    # ------------------------------------------------------------------

    def injectors(self):
        for inj in (self.p0_injector, self.p3_injector, self.p4_injector):
            if inj is not None:
                yield inj

    def set_gates(self, value: float) -> None:
        for inj in self.injectors():
            inj.gate.force(value)

    def force_zero_gates(self) -> None:
        self.set_gates(0.0)


def build_model(config: ModelConfig) -> tuple[DetectionModel, ParamReport]:
    """Deterministically construct a model and account for its parameters."""
    model = DetectionModel(config)
    assign_parameter_names(model)
    return model, param_report(model)


def param_report(model: Module) -> ParamReport:
    total = trainable = frozen = 0
    for p in model.parameters():
        n = p.numel()
        total += n
        if p.frozen:
            frozen += n
        else:
            trainable += n
    return ParamReport.build(total, trainable, frozen)


def planned_frozen_params(config: ModelConfig) -> int:
    """Closed-form frozen count for a config, without building the model."""
    plan = teacher_plan(config)
    if not plan:
        return 0
    if config.share_teachers:
        by_grid = {spec.grid_side: spec for spec in plan.values()}
        return sum(count_teacher_params(spec) for spec in by_grid.values())
    return sum(count_teacher_params(spec) for spec in plan.values())


# ----------------------------------------------------------------------
# decode


def decode_level(
    data: np.ndarray, stride: int, input_size: int, conf_threshold: float
) -> list[list[DetectionBox]]:
    """Decode one level's raw maps to normalized boxes (see module docstring)."""
    n, ch, s, _ = data.shape
    k = ch - 5
    sig = _stable_sigmoid(data.astype(np.float64))
    cols = np.arange(s).reshape(1, 1, s)
    rows = np.arange(s).reshape(1, s, 1)
    cx = (cols + sig[:, 0]) / s
    cy = (rows + sig[:, 1]) / s
    w = (2.0 * sig[:, 2]) ** 2 * stride / input_size
    h = (2.0 * sig[:, 3]) ** 2 * stride / input_size
    obj = sig[:, 4]
    cls = sig[:, 5:]
    best = cls.max(axis=1)
    cid = cls.argmax(axis=1)
    conf = obj * best

    out: list[list[DetectionBox]] = []
    for i in range(n):
        keep = np.argwhere(conf[i] >= conf_threshold)
        boxes = [
            DetectionBox(
                int(cid[i, r, c]),
                float(np.clip(cx[i, r, c], 0.0, 1.0)),
                float(np.clip(cy[i, r, c], 0.0, 1.0)),
                float(np.clip(w[i, r, c], 0.0, 1.0)),
                float(np.clip(h[i, r, c], 0.0, 1.0)),
                float(conf[i, r, c]),
            )
            for r, c in keep
        ]
        out.append(boxes)
    return out


def decode(
    preds: PyramidPrediction, conf_threshold: float, input_size: int
) -> list[list[DetectionBox]]:
    """Threshold and decode all levels; one box list per image."""
    if not 0.0 <= conf_threshold <= 1.0:
        raise ConfigError(f"conf_threshold must lie in [0,1], got {conf_threshold}")
    merged: Optional[list[list[DetectionBox]]] = None
    for _, stride, tensor in preds.levels():
        level_boxes = decode_level(tensor.data, stride, input_size, conf_threshold)
        if merged is None:
            merged = level_boxes
        else:
            for acc, extra in zip(merged, level_boxes):
                acc.extend(extra)
    return merged if merged is not None else []
