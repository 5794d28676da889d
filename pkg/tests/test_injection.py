"""Injector identities: zero-gate transparency, shapes, gradient routing."""

import numpy as np
import pytest

from vitfuse.core import Tensor, ops
from vitfuse.errors import ConfigError
from vitfuse.injection import (
    FeatureInjector,
    GatedFusion,
    InputInjector,
    IntegrationStrategy,
    Site,
    plan_injections,
    site_grid_side,
)
from vitfuse.teacher import TeacherSpec, VisionTeacher


def toy_teacher(grid, seed=0, patch=8):
    spec = TeacherSpec(depth=2, dim=32, heads=4, patch_size=patch, grid_side=grid)
    return VisionTeacher(spec, seed=seed)


class TestPlanInjections:
    def test_all_six_strategies(self):
        expected = {
            IntegrationStrategy.NONE: set(),
            IntegrationStrategy.SINGLE_P0: {Site.P0},
            IntegrationStrategy.SINGLE_P3: {Site.P3},
            IntegrationStrategy.DUAL_P3P4: {Site.P3, Site.P4},
            IntegrationStrategy.DUAL_P0P3: {Site.P0, Site.P3},
            IntegrationStrategy.TRIPLE: {Site.P0, Site.P3, Site.P4},
        }
        for strategy, sites in expected.items():
            assert plan_injections(strategy) == frozenset(sites)

    def test_parse_from_string(self):
        assert plan_injections("dualp0p3") == frozenset({Site.P0, Site.P3})
        with pytest.raises(ConfigError, match="unknown integration strategy"):
            IntegrationStrategy.parse("quadruple")

    def test_full_scale_token_arithmetic(self):
        assert site_grid_side(Site.P3, 640, 16) ** 2 == 6400
        assert site_grid_side(Site.P4, 640, 16) ** 2 == 1600
        assert site_grid_side(Site.P0, 640, 16) == 40


class TestGatedFusion:
    def test_zero_gate_is_identity(self):
        fusion = GatedFusion(4)
        x = Tensor(np.random.default_rng(0).standard_normal((2, 4, 3, 3)).astype(np.float32))
        delta = Tensor(np.random.default_rng(1).standard_normal((2, 4, 3, 3)).astype(np.float32))
        assert np.array_equal(fusion.fuse(x, delta).data, x.data)

    def test_gate_is_trainable_per_channel(self):
        fusion = GatedFusion(3)
        assert not fusion.gate.frozen
        assert fusion.gate.shape == (3,)
        assert np.all(fusion.gate.data == 0.0)


class TestInputInjector:
    def test_zero_gate_returns_raw_image(self):
        inj = InputInjector(toy_teacher(grid=8), np.random.default_rng(0))
        img = Tensor(np.random.default_rng(2).standard_normal((1, 3, 64, 64)).astype(np.float32))
        out = inj(img)
        assert np.array_equal(out.data, img.data)

    def test_shape_preserved_toy_geometry(self):
        # 64px image, patch 8 -> 8x8 teacher grid, upsampled x8 back to 64
        inj = InputInjector(toy_teacher(grid=8), np.random.default_rng(0))
        inj.gate.force(0.5)
        img = Tensor(np.random.default_rng(3).standard_normal((2, 3, 64, 64)).astype(np.float32))
        out = inj(img)
        assert out.shape == (2, 3, 64, 64)
        assert not np.array_equal(out.data, img.data)

    def test_replacement_mode_drops_residual(self):
        teacher = toy_teacher(grid=8)
        inj = InputInjector(teacher, np.random.default_rng(0), replace_input=True)
        img = Tensor(np.random.default_rng(4).standard_normal((1, 3, 64, 64)).astype(np.float32))
        out = inj(img)
        feats = teacher.forward_image(img)
        expected = inj.proj(ops.upsample_nearest(feats, 8))
        assert np.allclose(out.data, expected.data)  # gate starts at 1

    def test_indivisible_image_rejected(self):
        inj = InputInjector(toy_teacher(grid=8), np.random.default_rng(0))
        with pytest.raises(ConfigError):
            inj(Tensor(np.zeros((1, 3, 60, 60), dtype=np.float32)))


class TestFeatureInjector:
    def test_zero_gate_returns_input_map(self):
        inj = FeatureInjector(16, 8, toy_teacher(grid=8), np.random.default_rng(0))
        fmap = Tensor(np.random.default_rng(5).standard_normal((2, 16, 8, 8)).astype(np.float32))
        assert np.array_equal(inj(fmap).data, fmap.data)

    def test_shape_preserved_with_open_gate(self):
        inj = FeatureInjector(32, 8, toy_teacher(grid=8), np.random.default_rng(0))
        inj.gate.force(1.0)
        fmap = Tensor(np.random.default_rng(6).standard_normal((1, 32, 8, 8)).astype(np.float32))
        out = inj(fmap)
        assert out.shape == (1, 32, 8, 8)
        assert not np.array_equal(out.data, fmap.data)

    def test_token_count_exposed(self):
        inj = FeatureInjector(16, 8, toy_teacher(grid=8), np.random.default_rng(0))
        assert inj.token_count == 64

    def test_wrong_geometry_rejected(self):
        inj = FeatureInjector(16, 8, toy_teacher(grid=8), np.random.default_rng(0))
        with pytest.raises(ConfigError):
            inj(Tensor(np.zeros((1, 16, 4, 4), dtype=np.float32)))

    def test_gradients_reach_projections_not_teacher(self):
        inj = FeatureInjector(16, 4, toy_teacher(grid=4), np.random.default_rng(0))
        inj.gate.force(0.7)  # generic operating point; zero gate blocks proj grads
        fmap = Tensor(
            np.random.default_rng(7).standard_normal((1, 16, 4, 4)).astype(np.float32),
            requires_grad=True,
        )
        out = inj(fmap)
        ops.sum_(ops.mul(out, out)).backward()
        assert np.any(inj.proj_in.weight.grad != 0.0)
        assert np.any(inj.proj_out.weight.grad != 0.0)
        assert np.any(inj.gate.gate.grad != 0.0)
        assert fmap.grad is not None and np.any(fmap.grad != 0.0)
        for p in inj.teacher.parameters():
            assert p.grad is None

    def test_gate_gradient_nonzero_even_at_zero_gate(self):
        inj = FeatureInjector(8, 4, toy_teacher(grid=4), np.random.default_rng(1))
        fmap = Tensor(np.random.default_rng(8).standard_normal((1, 8, 4, 4)).astype(np.float32))
        ops.sum_(ops.mul(inj(fmap), 2.0)).backward()
        assert np.any(inj.gate.gate.grad != 0.0)
