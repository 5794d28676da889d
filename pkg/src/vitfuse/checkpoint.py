"""Versioned binary checkpoints.

Layout (all integers little-endian u32 unless noted):

    magic           4 bytes "DYCK"
    version         u32 (currently 1)
    config length   u32, then that many UTF-8 bytes of JSON:
                    {"model": <ModelConfig dict>, "step": <int>}
    param count     u32
    per parameter:  name length u32 + UTF-8 name
                    rank u32
                    extents u32 * rank
                    frozen u8
                    elements: raw little-endian float32, row-major

Frozen teacher tensors are stored despite being seed-reproducible, so a
checkpoint is self-contained. Loading validates every field and raises
CheckpointError naming the failing one; it never crashes on corrupt input.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .detector import DetectionModel, ModelConfig, build_model
from .errors import CheckpointError

MAGIC = b"DYCK"
VERSION = 1


def save_checkpoint(model: DetectionModel, path: str, step: int = 0) -> None:
    params = list(model.named_parameters())
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    config = json.dumps(
        {"model": model.config.to_dict(), "step": int(step)}, sort_keys=True
    ).encode("utf-8")
    buf.write(struct.pack("<I", len(config)))
    buf.write(config)
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        shape = p.data.shape
        buf.write(struct.pack("<I", len(shape)))
        for extent in shape:
            buf.write(struct.pack("<I", extent))
        buf.write(struct.pack("<B", 1 if p.frozen else 0))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(
                f"checkpoint truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, file has {len(self.raw)})"
            )
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return struct.unpack("<B", self.take(1, what))[0]


def load_checkpoint(path: str) -> tuple[DetectionModel, int]:
    """Rebuild the model from the stored config and restore every tensor."""
    with open(path, "rb") as f:
        reader = _Reader(f.read())

    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = reader.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config_len = reader.u32("config length")
    config_raw = reader.take(config_len, "config block")
    try:
        payload = json.loads(config_raw.decode("utf-8"))
        config = ModelConfig.from_dict(payload["model"])
        step = int(payload["step"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"invalid config block: {exc}") from exc

    model, _ = build_model(config)
    expected = dict(model.named_parameters())

    count = reader.u32("parameter count")
    if count != len(expected):
        raise CheckpointError(
            f"checkpoint holds {count} parameters, model defines {len(expected)}"
        )
    seen = set()
    for i in range(count):
        name_len = reader.u32(f"name length of parameter #{i}")
        name = reader.take(name_len, f"name of parameter #{i}").decode(
            "utf-8", errors="replace"
        )
        if name not in expected:
            raise CheckpointError(f"unknown parameter name '{name}'")
        rank = reader.u32(f"rank of parameter '{name}'")
        if rank > 8:
            raise CheckpointError(f"implausible rank {rank} for parameter '{name}'")
        extents = tuple(
            reader.u32(f"extent {d} of parameter '{name}'") for d in range(rank)
        )
        param = expected[name]
        if extents != param.data.shape:
            raise CheckpointError(
                f"shape mismatch for parameter '{name}': "
                f"stored extents {extents} vs model {param.data.shape}"
            )
        frozen = reader.u8(f"frozen flag of parameter '{name}'")
        if bool(frozen) != param.frozen:
            raise CheckpointError(
                f"frozen flag mismatch for parameter '{name}': "
                f"stored {bool(frozen)} vs model {param.frozen}"
            )
        n_elems = int(np.prod(extents, dtype=np.int64)) if extents else 1
        raw = reader.take(4 * n_elems, f"elements of parameter '{name}'")
        param.data[...] = np.frombuffer(raw, dtype="<f4").reshape(extents)
        seen.add(name)
    if reader.pos != len(reader.raw):
        raise CheckpointError(
            f"{len(reader.raw) - reader.pos} trailing bytes after the last parameter"
        )
    return model, step
