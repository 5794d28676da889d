"""Checkpoint persistence: bit-exact round trips and structured failures."""

import struct

import numpy as np
import pytest

from vitfuse.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from vitfuse.core import Tensor
from vitfuse.detector import ModelConfig, build_model, param_report
from vitfuse.errors import CheckpointError


def toy_model(strategy="dualp0p3", seed=0):
    cfg = ModelConfig(
        scale="s", teacher="toy-tiny", strategy=strategy,
        num_classes=2, input_size=64, seed=seed,
    )
    return build_model(cfg)[0]


@pytest.fixture
def saved(tmp_path):
    model = toy_model()
    # make the weights diverge from a fresh build so restoration is observable
    for p in model.parameters():
        if not p.frozen:
            p.data[...] += 0.01
    path = tmp_path / "model.dyck"
    save_checkpoint(model, str(path), step=17)
    return model, path


class TestRoundTrip:
    def test_param_report_identical(self, saved):
        model, path = saved
        loaded, step = load_checkpoint(str(path))
        assert step == 17
        assert param_report(loaded) == param_report(model)

    def test_all_tensors_bit_identical(self, saved):
        model, path = saved
        loaded, _ = load_checkpoint(str(path))
        a = dict(model.named_parameters())
        b = dict(loaded.named_parameters())
        assert a.keys() == b.keys()
        for name in a:
            assert np.array_equal(a[name].data, b[name].data), name
            assert a[name].frozen == b[name].frozen

    def test_forward_bit_identical(self, saved):
        model, path = saved
        loaded, _ = load_checkpoint(str(path))
        images = Tensor(np.random.default_rng(3).random((2, 3, 64, 64)).astype(np.float32))
        before = model(images)
        after = loaded(images)
        for (_, _, x), (_, _, y) in zip(before.levels(), after.levels()):
            assert np.array_equal(x.data, y.data)

    def test_config_restored(self, saved):
        _, path = saved
        loaded, _ = load_checkpoint(str(path))
        assert loaded.config.strategy == "dualp0p3"
        assert loaded.config.teacher == "toy-tiny"


class TestCorruption:
    def test_bad_magic(self, saved, tmp_path):
        _, path = saved
        raw = bytearray(path.read_bytes())
        raw[:4] = b"JUNK"
        bad = tmp_path / "bad_magic.dyck"
        bad.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="bad magic"):
            load_checkpoint(str(bad))

    def test_bad_version(self, saved, tmp_path):
        _, path = saved
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        bad = tmp_path / "bad_version.dyck"
        bad.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(str(bad))

    def test_truncation(self, saved, tmp_path):
        _, path = saved
        raw = path.read_bytes()
        bad = tmp_path / "truncated.dyck"
        bad.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(str(bad))

    def test_corrupt_extent_byte_is_shape_mismatch(self, saved, tmp_path):
        _, path = saved
        raw = bytearray(path.read_bytes())
        # locate the first parameter record: magic+version(8) + cfg block + count(4)
        cfg_len = struct.unpack("<I", raw[8:12])[0]
        pos = 12 + cfg_len + 4
        name_len = struct.unpack("<I", raw[pos : pos + 4])[0]
        pos += 4 + name_len
        rank_pos = pos
        rank = struct.unpack("<I", raw[rank_pos : rank_pos + 4])[0]
        assert rank >= 1
        extent_pos = rank_pos + 4
        raw[extent_pos] ^= 0xFF  # flip the low byte of the first extent
        bad = tmp_path / "bad_extent.dyck"
        bad.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="shape mismatch"):
            load_checkpoint(str(bad))

    def test_trailing_garbage_detected(self, saved, tmp_path):
        _, path = saved
        bad = tmp_path / "trailing.dyck"
        bad.write_bytes(path.read_bytes() + b"\x00\x01\x02")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(str(bad))

    def test_magic_constant_is_dyck(self):
        assert MAGIC == b"DYCK"
