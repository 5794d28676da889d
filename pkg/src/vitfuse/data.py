"""Dataset generation and loading.

Synthetic samples are filled axis-aligned shapes (class 0 = square,
class 1 = disc) on textured noise backgrounds, with exact bounding-box
labels. Generation is a pure function of the spec: sample i, attempt a
is seeded independently, so a regenerated sample never perturbs its
neighbours.

On disk a dataset is `images/*.ppm` (binary P6) plus `labels/*.txt`, one
line per box: "class cx cy w h" in normalized decimals, paired with the
image by filename stem. A missing label file means no objects.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .boxes import GroundTruthBox
from .errors import ConfigError, DataError
from .training import Dataset

PLACEMENT_RETRIES = 20
SAMPLE_ATTEMPTS = 50
MAX_OVERLAP_IOU = 0.25


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"  # or "directory"
    # synthetic fields
    seed: int = 0
    count: int = 100
    image_side: int = 64
    num_classes: int = 2
    min_objects: int = 1
    max_objects: int = 2
    min_size: int = 10
    max_size: int = 22
    # directory fields
    images_dir: str = ""
    labels_dir: str = ""

    def __post_init__(self):
        if self.source not in ("synthetic", "directory"):
            raise ConfigError(f"unknown dataset source '{self.source}'")
        if self.source == "synthetic":
            if self.image_side % 32:
                raise ConfigError(
                    f"image_side {self.image_side} must be divisible by 32"
                )
            if not (0 <= self.min_objects <= self.max_objects):
                raise ConfigError("objects-per-image range is invalid")
            if not (2 <= self.min_size <= self.max_size <= self.image_side):
                raise ConfigError("object-size range is invalid")
            if not (1 <= self.num_classes <= 2):
                raise ConfigError("synthetic generator supports 1 or 2 classes")


def _paint_square(img: np.ndarray, x0: int, y0: int, size: int, color: np.ndarray):
    img[:, y0 : y0 + size, x0 : x0 + size] = color[:, None, None]


def _paint_disc(img: np.ndarray, x0: int, y0: int, size: int, color: np.ndarray):
    r = size / 2.0
    cy, cx = y0 + r - 0.5, x0 + r - 0.5
    yy, xx = np.ogrid[: img.shape[1], : img.shape[2]]
    mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    img[:, mask] = color[:, None]


_PAINTERS = (_paint_square, _paint_disc)


def _render_sample(spec: DatasetSpec, rng: np.random.Generator):
    side = spec.image_side
    base = rng.uniform(0.05, 0.40, 3).astype(np.float32)
    image = base[:, None, None] + rng.normal(0.0, 0.06, (3, side, side)).astype(np.float32)
    np.clip(image, 0.0, 1.0, out=image)

    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes: list[GroundTruthBox] = []
    occupied: list[tuple[int, int, int]] = []
    for _ in range(count):
        placed = False
        for _attempt in range(PLACEMENT_RETRIES):
            size = int(rng.integers(spec.min_size, spec.max_size + 1))
            x0 = int(rng.integers(0, side - size + 1))
            y0 = int(rng.integers(0, side - size + 1))
            if all(
                _pixel_iou(x0, y0, size, ox, oy, osz) < MAX_OVERLAP_IOU
                for ox, oy, osz in occupied
            ):
                placed = True
                break
        if not placed:
            return None
        class_id = int(rng.integers(spec.num_classes))
        color = rng.uniform(0.55, 0.95, 3).astype(np.float32)
        _PAINTERS[class_id](image, x0, y0, size, color)
        occupied.append((x0, y0, size))
        boxes.append(
            GroundTruthBox(
                class_id,
                (x0 + size / 2) / side,
                (y0 + size / 2) / side,
                size / side,
                size / side,
            )
        )
    return image, boxes


def _pixel_iou(ax, ay, asz, bx, by, bsz) -> float:
    ix = max(0, min(ax + asz, bx + bsz) - max(ax, bx))
    iy = max(0, min(ay + asz, by + bsz) - max(ay, by))
    inter = ix * iy
    union = asz * asz + bsz * bsz - inter
    return inter / union if union else 0.0


def gen_synthetic_dataset(spec: DatasetSpec) -> Dataset:
    """Generate the dataset described by `spec` (deterministic per spec)."""
    if spec.source != "synthetic":
        raise ConfigError("gen_synthetic_dataset needs a synthetic spec")
    images = np.zeros((spec.count, 3, spec.image_side, spec.image_side), dtype=np.float32)
    labels: list[list[GroundTruthBox]] = []
    regenerated = 0
    for i in range(spec.count):
        sample = None
        for attempt in range(SAMPLE_ATTEMPTS):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=spec.seed, spawn_key=(i, attempt))
            )
            sample = _render_sample(spec, rng)
            if sample is not None:
                break
            regenerated += 1
        if sample is None:
            raise DataError(
                f"sample {i}: no valid object placement after "
                f"{SAMPLE_ATTEMPTS} regeneration attempts"
            )
        images[i] = sample[0]
        labels.append(sample[1])
    return Dataset(images=images, labels=labels, regenerated=regenerated)


# ----------------------------------------------------------------------
# PPM image I/O (binary P6, maxval 255)


def save_image_ppm(path: str, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ConfigError(f"expected a (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    rgb = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.transpose(1, 2, 0).tobytes())


def load_image_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    try:
        parts = raw.split(b"\n", 3)
        magic, dims, maxval, pixels = parts[0], parts[1], parts[2], parts[3]
        if magic != b"P6":
            raise DataError(f"{path}: not a binary PPM (magic {magic!r})")
        w, h = (int(v) for v in dims.split())
        if int(maxval) != 255:
            raise DataError(f"{path}: unsupported maxval {maxval!r}")
        data = np.frombuffer(pixels[: w * h * 3], dtype=np.uint8)
        if data.size != w * h * 3:
            raise DataError(f"{path}: pixel payload truncated")
    except (IndexError, ValueError) as exc:
        raise DataError(f"{path}: malformed PPM header: {exc}") from exc
    return (data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32)) / 255.0


# ----------------------------------------------------------------------
# label files


def parse_label_line(line: str, path: str, lineno: int) -> GroundTruthBox:
    tokens = line.split()
    if len(tokens) != 5:
        raise DataError(
            f"{path}:{lineno}: expected 5 fields 'class cx cy w h', got {len(tokens)}"
        )
    try:
        class_id = int(tokens[0])
    except ValueError:
        raise DataError(f"{path}:{lineno}: bad class token '{tokens[0]}'") from None
    values = []
    for name, token in zip(("cx", "cy", "w", "h"), tokens[1:]):
        try:
            value = float(token)
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad {name} token '{token}'") from None
        if not (0.0 <= value <= 1.0):
            raise DataError(
                f"{path}:{lineno}: field {name} = {value} outside [0, 1]"
            )
        values.append(value)
    if class_id < 0:
        raise DataError(f"{path}:{lineno}: negative class id {class_id}")
    return GroundTruthBox(class_id, *values).clamped()


def load_labels(labels_dir: str) -> dict[str, list[GroundTruthBox]]:
    """Parse every *.txt label file; keys are filename stems."""
    if not os.path.isdir(labels_dir):
        raise DataError(f"labels directory not found: {labels_dir}")
    out: dict[str, list[GroundTruthBox]] = {}
    for entry in sorted(os.listdir(labels_dir)):
        if not entry.endswith(".txt"):
            continue
        path = os.path.join(labels_dir, entry)
        boxes = []
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if line.strip():
                    boxes.append(parse_label_line(line, path, lineno))
        out[os.path.splitext(entry)[0]] = boxes
    return out


def save_dataset(dataset: Dataset, root: str) -> None:
    """Write images/NNNNN.ppm and labels/NNNNN.txt under `root`."""
    images_dir = os.path.join(root, "images")
    labels_dir = os.path.join(root, "labels")
    os.makedirs(images_dir, exist_ok=True)
    os.makedirs(labels_dir, exist_ok=True)
    for i in range(len(dataset)):
        stem = f"{i:05d}"
        save_image_ppm(os.path.join(images_dir, stem + ".ppm"), dataset.images[i])
        with open(os.path.join(labels_dir, stem + ".txt"), "w", encoding="utf-8") as f:
            for box in dataset.labels[i]:
                f.write(
                    f"{box.class_id} {box.cx:.6f} {box.cy:.6f} {box.w:.6f} {box.h:.6f}\n"
                )


def load_dataset_parts(images_dir: str, labels_dir: str) -> Dataset:
    """Load images and labels from the two directories, paired by stem."""
    if not os.path.isdir(images_dir):
        raise DataError(f"images directory not found: {images_dir}")
    stems = sorted(
        os.path.splitext(e)[0] for e in os.listdir(images_dir) if e.endswith(".ppm")
    )
    if not stems:
        raise DataError(f"no .ppm images under {images_dir}")
    labels_by_stem = load_labels(labels_dir) if os.path.isdir(labels_dir) else {}
    images = np.stack(
        [load_image_ppm(os.path.join(images_dir, stem + ".ppm")) for stem in stems]
    )
    labels = [labels_by_stem.get(stem, []) for stem in stems]
    return Dataset(images=images, labels=labels)


def load_dataset_dir(root: str) -> Dataset:
    """Load a dataset laid out as root/images + root/labels."""
    return load_dataset_parts(os.path.join(root, "images"), os.path.join(root, "labels"))


def load_dataset(spec: DatasetSpec) -> Dataset:
    """Materialize a DatasetSpec, synthetic or directory-backed."""
    if spec.source == "synthetic":
        return gen_synthetic_dataset(spec)
    if not spec.images_dir:
        raise ConfigError("directory dataset spec needs images_dir")
    labels_dir = spec.labels_dir or os.path.join(
        os.path.dirname(spec.images_dir.rstrip("/")), "labels"
    )
    return load_dataset_parts(spec.images_dir, labels_dir)
