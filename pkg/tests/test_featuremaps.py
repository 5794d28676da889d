"""PGM/PPM feature-map export: formats, degenerate rule, determinism."""

import numpy as np
import pytest

from vitfuse.core import Tensor
from vitfuse.detector import ModelConfig, build_model
from vitfuse.errors import ConfigError
from vitfuse.featuremaps import (
    EXPORT_SITES,
    export_feature_maps,
    normalize_to_bytes,
    pseudocolor,
    write_pgm,
)


@pytest.fixture(scope="module")
def model():
    cfg = ModelConfig(
        scale="s", teacher="toy-tiny", strategy="singlep3",
        num_classes=2, input_size=64, seed=0,
    )
    return build_model(cfg)[0]


def image(seed=0):
    return Tensor(np.random.default_rng(seed).random((1, 3, 64, 64)).astype(np.float32))


class TestNormalization:
    def test_constant_map_goes_to_zero(self):
        out = normalize_to_bytes(np.full((4, 4), 3.7))
        assert out.dtype == np.uint8
        assert np.all(out == 0)

    def test_range_maps_to_full_byte_span(self):
        out = normalize_to_bytes(np.array([[0.0, 1.0], [0.5, 0.25]]))
        assert out.min() == 0 and out.max() == 255

    def test_pseudocolor_endpoints(self):
        ramp = pseudocolor(np.array([[0, 255]], dtype=np.uint8))
        assert tuple(ramp[0, 0]) == (68, 1, 84)  # purple end
        assert tuple(ramp[0, 1]) == (253, 231, 37)  # yellow end


class TestExport:
    def test_p3_site_file_sizes(self, model, tmp_path):
        paths = export_feature_maps(model, image(), "p3-post", str(tmp_path), max_channels=4)
        assert len(paths) == 5  # 4 channels + mean
        header = open(paths[0], "rb").read(15)
        assert header.startswith(b"P5\n8 8\n255\n")  # 64/8 = 8 cells per side

    def test_p0_site_matches_input_size(self, model, tmp_path):
        paths = export_feature_maps(model, image(), "p0-out", str(tmp_path))
        assert any(p.endswith("p0-out_mean.pgm") for p in paths)
        with open(paths[-1], "rb") as f:
            assert f.read(12).startswith(b"P5\n64 64\n")

    def test_color_ppm_written(self, model, tmp_path):
        paths = export_feature_maps(model, image(), "p4", str(tmp_path), color=True, max_channels=1)
        assert paths[-1].endswith("p4_mean_color.ppm")
        with open(paths[-1], "rb") as f:
            assert f.read(2) == b"P6"

    def test_exports_byte_identical(self, model, tmp_path):
        a = export_feature_maps(model, image(), "p5", str(tmp_path / "a"), max_channels=2)
        b = export_feature_maps(model, image(), "p5", str(tmp_path / "b"), max_channels=2)
        for pa, pb in zip(a, b):
            assert open(pa, "rb").read() == open(pb, "rb").read()

    def test_unknown_site_rejected(self, model, tmp_path):
        with pytest.raises(ConfigError, match="unknown feature site"):
            export_feature_maps(model, image(), "p9", str(tmp_path))

    def test_all_sites_reachable(self, model, tmp_path):
        for site in EXPORT_SITES:
            paths = export_feature_maps(model, image(), site, str(tmp_path / site), max_channels=1)
            assert len(paths) == 2

    def test_write_pgm_validates_dtype(self, tmp_path):
        with pytest.raises(ConfigError):
            write_pgm(str(tmp_path / "x.pgm"), np.zeros((2, 2), dtype=np.float32))
