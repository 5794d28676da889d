"""Frozen vision-transformer teacher.

The teacher supplies semantic token features to the detector. It accepts
either raw images (patch embedding path) or pre-projected token grids
(mid-backbone path); both share one transformer block stack. Weights are
randomly initialized from a seed and frozen: every verifiable property
downstream (shapes, gradients, fusion identities, parameter accounting)
is weight-agnostic.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import (
    Conv2d,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    MultiHeadSelfAttention,
    Parameter,
    Tensor,
    ops,
)
from .errors import ConfigError, ShapeError

INIT_STD = 0.02


@dataclass(frozen=True)
class TeacherSpec:
    """Configuration of one teacher instance.

    grid_side fixes the token grid the positional table covers: an
    image-mode teacher sees (H/patch_size)^2 tokens, a token-mode teacher
    sees the feature-map grid at its injection site.
    """

    depth: int
    dim: int
    heads: int
    mlp_ratio: int = 4
    patch_size: int = 16
    grid_side: int = 40
    include_positional: bool = True
    frozen: bool = True

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigError(
                f"teacher heads={self.heads} must divide dim={self.dim}"
            )
        if min(self.depth, self.dim, self.heads, self.patch_size, self.grid_side) < 0:
            raise ConfigError("teacher spec fields must be nonnegative")

    @property
    def token_count(self) -> int:
        return self.grid_side * self.grid_side

    def with_grid(self, grid_side: int) -> "TeacherSpec":
        return replace(self, grid_side=grid_side)


# Presets. The two full-size variants mirror published ViT-B/16 and
# ViT-L/16 dimensions at a 640-pixel input (40x40 patch grid); the toy
# variants are desk-scale stand-ins for 64-pixel inputs.
TEACHER_VARIANTS: dict[str, TeacherSpec] = {
    "vitb16-full": TeacherSpec(depth=12, dim=768, heads=12, patch_size=16, grid_side=40),
    "vitl16-full": TeacherSpec(depth=24, dim=1024, heads=16, patch_size=16, grid_side=40),
    "toy-tiny": TeacherSpec(depth=2, dim=32, heads=4, patch_size=8, grid_side=8),
    "toy-small": TeacherSpec(depth=3, dim=64, heads=4, patch_size=8, grid_side=8),
}

TEACHER_SHORT_NAMES = {
    "vitb16-full": "vitb16",
    "vitl16-full": "vitl16",
    "toy-tiny": "toytiny",
    "toy-small": "toysmall",
}


def teacher_spec(variant: str) -> TeacherSpec:
    try:
        return TEACHER_VARIANTS[variant]
    except KeyError:
        known = ", ".join(sorted(TEACHER_VARIANTS))
        raise ConfigError(f"unknown teacher variant '{variant}' (known: {known})") from None


def count_teacher_params(spec: TeacherSpec) -> int:
    """Closed-form parameter count for a teacher built from `spec`.

    patch embed:  3 * p^2 * D + D
    positional:   grid^2 * D                (when include_positional)
    per block:    4 * (D^2 + D)             q/k/v/out projections
                + D * (m*D) + m*D           MLP in
                + (m*D) * D + D             MLP out
                + 4 * D                     two layer norms
    final norm:   2 * D
    """
    d, p, m = spec.dim, spec.patch_size, spec.mlp_ratio
    patch = 3 * p * p * d + d
    pos = spec.token_count * d if spec.include_positional else 0
    block = 4 * (d * d + d) + (d * m * d + m * d) + (m * d * d + d) + 4 * d
    return patch + pos + spec.depth * block + 2 * d


class TransformerBlock(Module):
    """Pre-norm block: x += attn(norm(x)); x += mlp(norm(x))."""

    def __init__(self, spec: TeacherSpec, rng: np.random.Generator):
        super().__init__()
        frozen = spec.frozen
        self.norm1 = LayerNorm(spec.dim, frozen=frozen)
        self.attn = MultiHeadSelfAttention(
            spec.dim, spec.heads, rng, frozen=frozen, init_std=INIT_STD
        )
        self.norm2 = LayerNorm(spec.dim, frozen=frozen)
        hidden = spec.mlp_ratio * spec.dim
        self.fc1 = Linear(spec.dim, hidden, rng, frozen=frozen, init_std=INIT_STD)
        self.fc2 = Linear(hidden, spec.dim, rng, frozen=frozen, init_std=INIT_STD)

    def forward(self, x: Tensor) -> Tensor:
        x = ops.add(x, self.attn(self.norm1(x)))
        x = ops.add(x, self.fc2(ops.silu(self.fc1(self.norm2(x)))))
        return x


class VisionTeacher(Module):
    """Transformer encoder with image and token entry paths.

    The positional table is added exactly once per forward: patch_embed
    adds it on the image path, forward_tokens adds it on the token path.
    forward_image therefore equals forward_tokens(patch_embed(image))
    with the token-path positional add suppressed.
    """

    def __init__(self, spec: TeacherSpec, seed: int = 0, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.spec = spec
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.patch = Conv2d(
            3,
            spec.dim,
            spec.patch_size,
            rng,
            stride=spec.patch_size,
            frozen=spec.frozen,
            init_std=INIT_STD,
        )
        if spec.include_positional:
            table = rng.normal(0.0, INIT_STD, (spec.token_count, spec.dim))
            self.positional = Parameter(
                Tensor(table.astype(np.float32)), frozen=spec.frozen
            )
        else:
            self.positional = None
        self.blocks = ModuleList(
            TransformerBlock(spec, rng) for _ in range(spec.depth)
        )
        self.final_norm = LayerNorm(spec.dim, frozen=spec.frozen)

    # ------------------------------------------------------------------

    def _check_image(self, image: Tensor) -> int:
        if image.data.ndim != 4 or image.data.shape[1] != 3:
            raise ShapeError(f"teacher expects (N,3,H,W) images, got {image.data.shape}")
        p = self.spec.patch_size
        _, _, h, w = image.data.shape
        if h % p or w % p:
            raise ConfigError(
                f"image extent {h}x{w} not divisible by patch size {p}"
            )
        side = h // p
        if self.spec.include_positional and (
            side != self.spec.grid_side or w // p != self.spec.grid_side
        ):
            raise ConfigError(
                f"image yields a {side}x{w // p} patch grid but the positional "
                f"table covers {self.spec.grid_side}x{self.spec.grid_side}"
            )
        return side

    def patch_embed(self, image: Tensor) -> Tensor:
        """Project non-overlapping patches to D and add positions: (N, T, D)."""
        self._check_image(image)
        grid = self.patch(image)  # (N, D, S, S)
        tokens = ops.tokens_from_map(grid)
        if self.positional is not None:
            tokens = ops.add(tokens, self.positional.tensor)
        return tokens

    def _encode(self, tokens: Tensor) -> Tensor:
        for block in self.blocks:
            tokens = block(tokens)
        return self.final_norm(tokens)

    def forward_tokens(self, tokens: Tensor, add_positional: Optional[bool] = None) -> Tensor:
        """Run the block stack on a (N, T, D) sequence.

        add_positional defaults to the spec setting; pass False for
        sequences that already carry positions (e.g. patch_embed output).
        """
        if tokens.data.ndim != 3 or tokens.data.shape[-1] != self.spec.dim:
            raise ShapeError(
                f"teacher of width {self.spec.dim} got token shape {tokens.data.shape}"
            )
        if add_positional is None:
            add_positional = self.spec.include_positional
        if add_positional and self.positional is not None:
            if tokens.data.shape[1] != self.spec.token_count:
                raise ConfigError(
                    f"token count {tokens.data.shape[1]} does not match the "
                    f"positional table ({self.spec.token_count})"
                )
            tokens = ops.add(tokens, self.positional.tensor)
        return self._encode(tokens)

    def forward_image(self, image: Tensor) -> Tensor:
        """Image -> (N, D, H/p, W/p) grid of encoded patch features."""
        side = self._check_image(image)
        encoded = self.forward_tokens(self.patch_embed(image), add_positional=False)
        return ops.map_from_tokens(encoded, side)

    forward = forward_image

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
