"""Activation-map export as binary PGM/PPM images.

Each channel of the captured activation is min-max normalized to 0..255
and written as a binary (P5) PGM, together with one mean-over-channels
map. A constant channel has no range; the documented degenerate rule
maps it to 0 everywhere. The optional pseudocolor PPM (P6) uses a fixed
purple -> cyan -> green -> yellow ramp.
"""

from __future__ import annotations

import os
from typing import Optional

import numpy as np

from .core import Tensor, autograd_off
from .errors import ConfigError

EXPORT_SITES = ("p0-out", "p3-pre", "p3-post", "p4", "p5")

# ramp anchors at t = 0, 1/3, 2/3, 1
_RAMP = np.array(
    [
        (68, 1, 84),  # purple
        (33, 145, 140),  # cyan
        (94, 201, 98),  # green
        (253, 231, 37),  # yellow
    ],
    dtype=np.float64,
)


def normalize_to_bytes(channel: np.ndarray) -> np.ndarray:
    """Min-max normalize one 2-D map to uint8; constant maps become 0."""
    lo = float(channel.min())
    hi = float(channel.max())
    if hi - lo < 1e-12:
        return np.zeros(channel.shape, dtype=np.uint8)
    scaled = (channel.astype(np.float64) - lo) / (hi - lo)
    return np.round(scaled * 255.0).astype(np.uint8)


def write_pgm(path: str, gray: np.ndarray) -> None:
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ConfigError("write_pgm expects a 2-D uint8 array")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(gray.tobytes())


def write_ppm(path: str, rgb: np.ndarray) -> None:
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ConfigError("write_ppm expects an (H, W, 3) uint8 array")
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def pseudocolor(gray: np.ndarray) -> np.ndarray:
    """Map uint8 intensities through the fixed 4-anchor color ramp."""
    t = gray.astype(np.float64) / 255.0
    pos = t * (len(_RAMP) - 1)
    idx = np.clip(pos.astype(int), 0, len(_RAMP) - 2)
    frac = (pos - idx)[..., None]
    rgb = _RAMP[idx] * (1.0 - frac) + _RAMP[idx + 1] * frac
    return np.round(rgb).astype(np.uint8)


def capture_site(model, image: Tensor, site: str) -> np.ndarray:
    """Forward once and return the (C, H, W) activation at `site`."""
    site = site.lower()
    if site not in EXPORT_SITES:
        raise ConfigError(
            f"unknown feature site '{site}' (known: {', '.join(EXPORT_SITES)})"
        )
    taps: dict = {}
    with autograd_off():
        model(image, taps=taps)
    return taps[site].data[0]


def export_feature_maps(
    model,
    image: Tensor,
    site: str,
    out_dir: str,
    color: bool = False,
    max_channels: Optional[int] = None,
) -> list[str]:
    """Write per-channel PGMs plus a channel-mean map; returns file paths."""
    activation = capture_site(model, image, site)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    channels = activation.shape[0]
    if max_channels is not None:
        channels = min(channels, max_channels)
    for c in range(channels):
        path = os.path.join(out_dir, f"{site}_ch{c:03d}.pgm")
        write_pgm(path, normalize_to_bytes(activation[c]))
        written.append(path)
    mean_map = normalize_to_bytes(activation.mean(axis=0))
    mean_path = os.path.join(out_dir, f"{site}_mean.pgm")
    write_pgm(mean_path, mean_map)
    written.append(mean_path)
    if color:
        color_path = os.path.join(out_dir, f"{site}_mean_color.ppm")
        write_ppm(color_path, pseudocolor(mean_map))
        written.append(color_path)
    return written
