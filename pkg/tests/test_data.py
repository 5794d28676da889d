"""Synthetic generation determinism, label parsing, dataset I/O."""

import numpy as np
import pytest

from vitfuse.boxes import GroundTruthBox
from vitfuse.data import (
    DatasetSpec,
    gen_synthetic_dataset,
    load_dataset_dir,
    load_image_ppm,
    load_labels,
    parse_label_line,
    save_dataset,
    save_image_ppm,
)
from vitfuse.errors import ConfigError, DataError


class TestSyntheticGeneration:
    def test_same_spec_identical_output(self):
        spec = DatasetSpec(seed=3, count=8)
        a = gen_synthetic_dataset(spec)
        b = gen_synthetic_dataset(spec)
        assert np.array_equal(a.images, b.images)
        assert a.labels == b.labels

    def test_empty_object_range_gives_empty_labels(self):
        spec = DatasetSpec(seed=0, count=5, min_objects=0, max_objects=0)
        ds = gen_synthetic_dataset(spec)
        assert all(labels == [] for labels in ds.labels)

    def test_boxes_are_exact_for_painted_shapes(self):
        spec = DatasetSpec(seed=1, count=20, min_objects=1, max_objects=2)
        ds = gen_synthetic_dataset(spec)
        for labels in ds.labels:
            for box in labels:
                box.validate()
                # pixel-aligned geometry: w * side is an integer size
                assert abs(box.w * spec.image_side - round(box.w * spec.image_side)) < 1e-6

    def test_center_square_geometry(self):
        # square of side 16 centered in a 64px image -> (0.5, 0.5, 0.25, 0.25)
        from vitfuse.data import _paint_square

        img = np.zeros((3, 64, 64), dtype=np.float32)
        _paint_square(img, 24, 24, 16, np.ones(3, dtype=np.float32))
        box = GroundTruthBox(0, (24 + 8) / 64, (24 + 8) / 64, 16 / 64, 16 / 64)
        assert (box.cx, box.cy, box.w, box.h) == (0.5, 0.5, 0.25, 0.25)
        assert img[0, 24:40, 24:40].all() and img[0, 23, 24] == 0.0

    def test_classes_are_square_and_disc(self):
        spec = DatasetSpec(seed=2, count=30, min_objects=2, max_objects=2)
        ds = gen_synthetic_dataset(spec)
        classes = {b.class_id for labels in ds.labels for b in labels}
        assert classes == {0, 1}

    def test_images_in_unit_range(self):
        ds = gen_synthetic_dataset(DatasetSpec(seed=4, count=4))
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_invalid_spec_rejected(self):
        with pytest.raises(ConfigError):
            DatasetSpec(image_side=50)
        with pytest.raises(ConfigError):
            DatasetSpec(min_size=1)
        with pytest.raises(ConfigError):
            DatasetSpec(min_objects=3, max_objects=1)


class TestPpmRoundTrip:
    def test_save_load_quantized(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.random((3, 32, 32)).astype(np.float32)
        path = str(tmp_path / "img.ppm")
        save_image_ppm(path, img)
        back = load_image_ppm(path)
        assert back.shape == (3, 32, 32)
        assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-6

    def test_uint8_exact_round_trip(self, tmp_path):
        img = (np.arange(3 * 4 * 4).reshape(3, 4, 4) % 256).astype(np.float32) / 255.0
        path = str(tmp_path / "exact.ppm")
        save_image_ppm(path, img)
        assert np.array_equal(load_image_ppm(path), img.astype(np.float32))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P3\n2 2\n255\nnope")
        with pytest.raises(DataError, match="magic"):
            load_image_ppm(str(path))


class TestLabelParsing:
    def test_single_line(self):
        box = parse_label_line("0 0.5 0.5 0.25 0.25", "f.txt", 1)
        assert box == GroundTruthBox(0, 0.5, 0.5, 0.25, 0.25)

    def test_empty_file_is_valid(self, tmp_path):
        (tmp_path / "a.txt").write_text("")
        assert load_labels(str(tmp_path)) == {"a": []}

    def test_out_of_range_w_names_field(self):
        with pytest.raises(DataError, match="field w"):
            parse_label_line("2 0.5 0.5 1.5 0.2", "labels/x.txt", 3)

    def test_malformed_token_has_context(self):
        with pytest.raises(DataError, match=r"x\.txt:7.*cy.*'abc'"):
            parse_label_line("0 0.5 abc 0.2 0.2", "x.txt", 7)

    def test_wrong_field_count(self):
        with pytest.raises(DataError, match="expected 5 fields"):
            parse_label_line("0 0.5 0.5 0.2", "x.txt", 1)

    def test_edge_overhang_clamped(self):
        # cx + w/2 = 1.1: individual values are in range, box is clamped
        box = parse_label_line("0 0.9 0.5 0.4 0.2", "x.txt", 1)
        assert box.cx + box.w / 2 <= 1.0 + 1e-9
        box.validate()

    def test_missing_directory(self):
        with pytest.raises(DataError, match="not found"):
            load_labels("/nonexistent/labels")


class TestDatasetDirRoundTrip:
    def test_save_then_load(self, tmp_path):
        ds = gen_synthetic_dataset(DatasetSpec(seed=5, count=6))
        root = str(tmp_path / "data")
        save_dataset(ds, root)
        back = load_dataset_dir(root)
        assert len(back) == 6
        assert back.images.shape == ds.images.shape
        # labels survive the text round trip up to 1e-6 formatting
        for a_list, b_list in zip(ds.labels, back.labels):
            assert len(a_list) == len(b_list)
            for a, b in zip(a_list, b_list):
                assert a.class_id == b.class_id
                assert abs(a.cx - b.cx) < 1e-5 and abs(a.w - b.w) < 1e-5

    def test_byte_identical_files_for_same_spec(self, tmp_path):
        spec = DatasetSpec(seed=9, count=3)
        root_a, root_b = str(tmp_path / "a"), str(tmp_path / "b")
        save_dataset(gen_synthetic_dataset(spec), root_a)
        save_dataset(gen_synthetic_dataset(spec), root_b)
        import os

        for sub in ("images", "labels"):
            for entry in sorted(os.listdir(os.path.join(root_a, sub))):
                pa = os.path.join(root_a, sub, entry)
                pb = os.path.join(root_b, sub, entry)
                with open(pa, "rb") as fa, open(pb, "rb") as fb:
                    assert fa.read() == fb.read(), entry
