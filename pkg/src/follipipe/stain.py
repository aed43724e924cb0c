"""Reinhard-style color transfer for stain normalization.

Pixels move to a logarithmic decorrelated color space (RGB -> LMS ->
log10 -> laB rotation), get their per-channel mean/std remapped onto a
reference patch's statistics, and come back. The forward matrices are the
published color-transfer constants (see README); the inverse matrices are
their exact numerical inverses so the round trip is identity up to 8-bit
quantization.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .images import RgbImage

# RGB -> LMS cone response (published constants, 4 decimals).
_RGB_TO_LMS = np.array([
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
])
# log10(LMS) -> decorrelated laB: scaled rotation with 1/sqrt(3), 1/sqrt(6), 1/sqrt(2).
_LMS_TO_LAB = np.diag([1.0 / np.sqrt(3.0), 1.0 / np.sqrt(6.0), 1.0 / np.sqrt(2.0)]) @ np.array([
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -2.0],
    [1.0, -1.0, 0.0],
])
_LMS_TO_RGB = np.linalg.inv(_RGB_TO_LMS)
_LAB_TO_LMS = np.linalg.inv(_LMS_TO_LAB)

# Channel values are floored here before the log so blank (0) pixels stay finite.
_MIN_CHANNEL = 1.0 / 255.0
# Degenerate (constant-channel) patches divide by this instead of a 0 std.
_MIN_STD = 1e-6


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean/std in the decorrelated space."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if any(s < 0 for s in self.std):
            raise ValueError(f"std components must be >= 0, got {self.std}")


def rgb_to_decorrelated(image: RgbImage) -> np.ndarray:
    """(3, H, W) float64 decorrelated representation of an 8-bit image."""
    rgb = image.pixels.astype(np.float64) / 255.0
    rgb = np.maximum(rgb, _MIN_CHANNEL)
    lms = rgb @ _RGB_TO_LMS.T
    lab = np.log10(lms) @ _LMS_TO_LAB.T
    return lab.transpose(2, 0, 1)


def decorrelated_to_rgb(decorrelated: np.ndarray) -> RgbImage:
    """Inverse of rgb_to_decorrelated, clamped to [0, 255] and quantized."""
    if decorrelated.ndim != 3 or decorrelated.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) array, got shape {decorrelated.shape}")
    lab = decorrelated.transpose(1, 2, 0)
    lms = np.power(10.0, lab @ _LAB_TO_LMS.T)
    rgb = lms @ _LMS_TO_RGB.T
    pixels = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    return RgbImage.from_array(pixels)


def channel_stats(decorrelated: np.ndarray) -> ChannelStats:
    """Population mean/std per channel of a (3, H, W) decorrelated image."""
    if decorrelated.ndim != 3 or decorrelated.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) array, got shape {decorrelated.shape}")
    mean = decorrelated.mean(axis=(1, 2))
    std = decorrelated.std(axis=(1, 2))  # population std
    return ChannelStats(mean=tuple(mean), std=tuple(std))


def reference_stats(image: RgbImage) -> ChannelStats:
    """Stats of the user-chosen staining reference patch."""
    return channel_stats(rgb_to_decorrelated(image))


def reinhard_transfer(src: RgbImage, ref: ChannelStats) -> RgbImage:
    """Remap src so its decorrelated channel statistics match ref."""
    lab = rgb_to_decorrelated(src)
    src_stats = channel_stats(lab)
    out = np.empty_like(lab)
    for c in range(3):
        scale = ref.std[c] / max(src_stats.std[c], _MIN_STD)
        out[c] = (lab[c] - src_stats.mean[c]) * scale + ref.mean[c]
    return decorrelated_to_rgb(out)
