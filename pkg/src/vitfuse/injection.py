"""Feature injection: gated residual fusion of frozen teacher features.

Two injector shapes exist:

* the input preprocessor replaces the usual identity input transform with
  a gated residual blend of the raw image and teacher features projected
  back to 3 channels, and
* the mid-backbone injector routes a feature map through the teacher as a
  token sequence (1x1 projection to the teacher width and back) before
  the gated residual merge.

Every gate starts at zero, so a freshly mounted injector is exactly the
identity on its input.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import Conv2d, Module, Parameter, Tensor, ops
from .errors import ConfigError
from .teacher import TeacherSpec, VisionTeacher


class Site(str, enum.Enum):
    P0 = "p0"
    P3 = "p3"
    P4 = "p4"


SITE_STRIDES = {Site.P3: 8, Site.P4: 16}


class IntegrationStrategy(str, enum.Enum):
    NONE = "none"
    SINGLE_P0 = "singlep0"
    SINGLE_P3 = "singlep3"
    DUAL_P3P4 = "dualp3p4"
    DUAL_P0P3 = "dualp0p3"
    TRIPLE = "triple"

    @classmethod
    def parse(cls, value) -> "IntegrationStrategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            known = ", ".join(s.value for s in cls)
            raise ConfigError(
                f"unknown integration strategy '{value}' (known: {known})"
            ) from None


_STRATEGY_SITES = {
    IntegrationStrategy.NONE: frozenset(),
    IntegrationStrategy.SINGLE_P0: frozenset({Site.P0}),
    IntegrationStrategy.SINGLE_P3: frozenset({Site.P3}),
    IntegrationStrategy.DUAL_P3P4: frozenset({Site.P3, Site.P4}),
    IntegrationStrategy.DUAL_P0P3: frozenset({Site.P0, Site.P3}),
    IntegrationStrategy.TRIPLE: frozenset({Site.P0, Site.P3, Site.P4}),
}


def plan_injections(strategy: IntegrationStrategy) -> frozenset[Site]:
    """Map a strategy to its fixed set of injection sites."""
    return _STRATEGY_SITES[IntegrationStrategy.parse(strategy)]


@dataclass(frozen=True)
class InjectorConfig:
    """Resolved geometry of one mounted injector."""

    site: Site
    teacher: TeacherSpec
    channels: int  # feature channels at the site (3 at P0)
    grid_side: int  # token grid side at the site

    @property
    def token_count(self) -> int:
        return self.grid_side * self.grid_side


def site_grid_side(site: Site, input_size: int, patch_size: int) -> int:
    """Token-grid side a teacher sees at `site` for a square input."""
    if site is Site.P0:
        if input_size % patch_size:
            raise ConfigError(
                f"input size {input_size} not divisible by teacher patch {patch_size}"
            )
        return input_size // patch_size
    stride = SITE_STRIDES[site]
    if input_size % stride:
        raise ConfigError(f"input size {input_size} not divisible by stride {stride}")
    return input_size // stride


class GatedFusion(Module):
    """Per-output-channel gate, zero-initialized: out = residual + gate * delta."""

    def __init__(self, channels: int):
        super().__init__()
        self.gate = Parameter(Tensor(np.zeros(channels, dtype=np.float32)))

    def fuse(self, residual: Tensor, delta: Tensor) -> Tensor:
        g = ops.reshape(self.gate.tensor, (1, -1, 1, 1))
        return ops.add(residual, ops.mul(g, delta))

    def scale(self, delta: Tensor) -> Tensor:
        g = ops.reshape(self.gate.tensor, (1, -1, 1, 1))
        return ops.mul(g, delta)

    def force(self, value: float) -> None:
        self.gate.data[...] = value


class InputInjector(Module):
    """P0 preprocessor: image + gate * proj_3(upsample(teacher(image))).

    With replace_input=True the residual path is dropped (the literal
    input-replacement reading) and the gate starts at 1 instead of 0.
    """

    def __init__(
        self,
        teacher: VisionTeacher,
        rng: np.random.Generator,
        replace_input: bool = False,
    ):
        super().__init__()
        self.teacher = teacher
        self.replace_input = replace_input
        self.proj = Conv2d(teacher.spec.dim, 3, 1, rng)
        self.gate = GatedFusion(3)
        if replace_input:
            self.gate.force(1.0)

    def forward(self, image: Tensor) -> Tensor:
        feats = self.teacher.forward_image(image)
        up = ops.upsample_nearest(feats, self.teacher.spec.patch_size)
        delta = self.proj(up)
        if self.replace_input:
            return self.gate.scale(delta)
        return self.gate.fuse(image, delta)


class FeatureInjector(Module):
    """P3/P4 injector: fmap + gate * proj_out(teacher(tokens(proj_in(fmap))))."""

    def __init__(
        self,
        channels: int,
        grid_side: int,
        teacher: VisionTeacher,
        rng: np.random.Generator,
    ):
        super().__init__()
        self.channels = channels
        self.grid_side = grid_side
        self.teacher = teacher
        self.proj_in = Conv2d(channels, teacher.spec.dim, 1, rng)
        self.proj_out = Conv2d(teacher.spec.dim, channels, 1, rng)
        self.gate = GatedFusion(channels)

    @property
    def token_count(self) -> int:
        return self.grid_side * self.grid_side

    def forward(self, fmap: Tensor) -> Tensor:
        n, c, s, s2 = fmap.data.shape
        if c != self.channels or s != self.grid_side or s2 != self.grid_side:
            raise ConfigError(
                f"injector built for {self.channels}x{self.grid_side}x{self.grid_side} "
                f"maps, got {fmap.data.shape}"
            )
        tokens = ops.tokens_from_map(self.proj_in(fmap))
        encoded = self.teacher.forward_tokens(tokens)
        delta = self.proj_out(ops.map_from_tokens(encoded, self.grid_side))
        return self.gate.fuse(fmap, delta)
