"""Offline augmentation: rotation, zoom and smooth elastic distortion.

All warps resample with bilinear interpolation and replicate edge pixels
for coordinates that fall outside the frame.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from .dataset import ImageSample, group_by_subject
from .errors import ConfigError, ProtocolError


@dataclass(frozen=True)
class AugmentConfig:
    target_per_subject: int = 35
    rotation_range: float = 10.0
    zoom_range: tuple[float, float] = (0.9, 1.1)
    distortion_strength: float = 4.0
    distortion_smoothing: float = 16.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "zoom_range", tuple(self.zoom_range))

    def validate(self, n_originals: int = 1) -> None:
        if self.target_per_subject < n_originals:
            raise ConfigError(
                f"target_per_subject ({self.target_per_subject}) is below the {n_originals} originals")
        if self.rotation_range < 0:
            raise ConfigError("rotation_range must be >= 0")
        lo, hi = self.zoom_range
        if not 0 < lo <= hi:
            raise ConfigError(f"zoom_range must satisfy 0 < lo <= hi, got {self.zoom_range}")
        if self.distortion_strength < 0 or self.distortion_smoothing <= 0:
            raise ConfigError("distortion_strength must be >= 0 and distortion_smoothing > 0")


def _grid(shape):
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    return rr, cc, (h - 1) / 2.0, (w - 1) / 2.0


def _sample(img: np.ndarray, rows, cols) -> np.ndarray:
    out = ndimage.map_coordinates(np.asarray(img, dtype=np.float64), [rows, cols], order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0).astype(np.asarray(img).dtype, copy=False)


def _rotate_coords(rr, cc, cy, cx, angle):
    t = np.deg2rad(angle)
    r0, c0 = rr - cy, cc - cx
    return np.cos(t) * r0 + np.sin(t) * c0 + cy, -np.sin(t) * r0 + np.cos(t) * c0 + cx


def _zoom_coords(rr, cc, cy, cx, scale):
    return (rr - cy) / scale + cy, (cc - cx) / scale + cx


def random_rotation(img: np.ndarray, angle: float) -> np.ndarray:
    """Rotate about the image centre by ``angle`` degrees (counter-clockwise)."""
    if angle == 0:
        return np.array(img, copy=True)
    rr, cc, cy, cx = _grid(img.shape)
    return _sample(img, *_rotate_coords(rr, cc, cy, cx, angle))


def random_zoom(img: np.ndarray, scale: float) -> np.ndarray:
    """Scale about the centre; ``scale > 1`` zooms in."""
    if scale == 1:
        return np.array(img, copy=True)
    rr, cc, cy, cx = _grid(img.shape)
    return _sample(img, *_zoom_coords(rr, cc, cy, cx, scale))


def distortion_field(shape, strength: float, smoothing: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth random (2, H, W) displacement field whose largest displacement is ``strength`` px."""
    raw = rng.standard_normal((2, *shape))
    if strength == 0:
        return np.zeros((2, *shape))
    field = np.stack([ndimage.gaussian_filter(raw[i], smoothing, mode="reflect") for i in range(2)])
    peak = np.abs(field).max()
    return field * (strength / peak) if peak > 0 else field


def random_distortion(img: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Elastic warp: output pixel (r, c) reads input at (r + dy, c + dx)."""
    if not np.any(field):
        return np.array(img, copy=True)
    rr, cc, _, _ = _grid(img.shape)
    return _sample(img, rr + field[0], cc + field[1])


def augment_image(img: np.ndarray, angle: float, scale: float, field: np.ndarray) -> np.ndarray:
    """rotation(zoom(distortion(img))) resampled in a single interpolation pass."""
    if angle == 0 and scale == 1 and not np.any(field):
        return np.array(img, copy=True)
    rr, cc, cy, cx = _grid(img.shape)
    r, c = _rotate_coords(rr, cc, cy, cx, angle)
    r, c = _zoom_coords(r, c, cy, cx, scale)
    dy = ndimage.map_coordinates(field[0], [r, c], order=1, mode="nearest")
    dx = ndimage.map_coordinates(field[1], [r, c], order=1, mode="nearest")
    return _sample(img, r + dy, c + dx)


def subject_seed(seed: int, subject: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(subject.encode())])


def augment_subject(originals: Sequence[ImageSample], config: AugmentConfig) -> list[ImageSample]:
    """Originals first and untouched, then augmented copies cycling over them."""
    if not originals:
        raise ProtocolError("augment_subject needs at least one original image")
    subjects = {s.subject for s in originals}
    if len(subjects) != 1:
        raise ProtocolError(f"originals span several subjects: {sorted(subjects)}")
    config.validate(len(originals))
    rng = np.random.default_rng(subject_seed(config.seed, originals[0].subject))
    out = list(originals)
    lo, hi = config.zoom_range
    for k in range(config.target_per_subject - len(originals)):
        src = originals[k % len(originals)]
        angle = rng.uniform(-config.rotation_range, config.rotation_range)
        scale = rng.uniform(lo, hi)
        field = distortion_field(src.pixels.shape, config.distortion_strength,
                                 config.distortion_smoothing, rng)
        out.append(replace(src, pixels=augment_image(src.pixels, angle, scale, field), split="augmented"))
    return out


def augment_dataset(samples: Sequence[ImageSample], config: AugmentConfig) -> list[ImageSample]:
    out = []
    for _, group in group_by_subject(samples).items():
        out.extend(augment_subject(sorted(group, key=lambda s: s.index), config))
    return out
