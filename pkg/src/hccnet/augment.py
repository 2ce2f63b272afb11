"""View extraction and augmentation for 3D multi-series volumes.

Order is fixed: series select/stack -> crop -> intensity -> flip/rotate.
All functions are pure given the ``numpy.random.Generator`` they receive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .volumes import StudyVisit, Volume

GLOBAL_CROP = 72
LOCAL_CROP = 48


@dataclass(frozen=True)
class ViewSpec:
    crop_size: int
    kind: Literal["global", "local"] = "global"


@dataclass(frozen=True)
class AugmentConfig:
    p_flip: float = 0.5
    p_rot90: float = 0.5
    p_intensity: float = 1.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    shift_range: tuple[float, float] = (-0.1, 0.1)
    global_crop: int = GLOBAL_CROP
    local_crop: int = LOCAL_CROP

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(x) for x in self.scale_range))
        object.__setattr__(self, "shift_range", tuple(float(x) for x in self.shift_range))
        for p in (self.p_flip, self.p_rot90, self.p_intensity):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must be a positive interval")
        if self.shift_range[0] > self.shift_range[1]:
            raise ValueError("shift_range is reversed")

    @classmethod
    def identity(cls, **kw) -> "AugmentConfig":
        """No random transform apart from cropping."""
        return cls(p_flip=0.0, p_rot90=0.0, p_intensity=0.0, **kw)


def random_crop(v: Volume, s: int, rng: np.random.Generator) -> Volume:
    if any(s > d for d in v.dims):
        raise ValueError(f"crop {s} larger than volume dims {v.dims}")
    origin = [int(rng.integers(0, d - s + 1)) for d in v.dims]
    return _crop_at(v, s, origin)


def central_crop(v: Volume, s: int) -> Volume:
    if any(s > d for d in v.dims):
        raise ValueError(f"crop {s} larger than volume dims {v.dims}")
    return _crop_at(v, s, [(d - s) // 2 for d in v.dims])


def _crop_at(v: Volume, s: int, origin) -> Volume:
    z, y, x = origin
    return Volume(v.data[:, z : z + s, y : y + s, x : x + s], v.spacing)


def sample_series(visit: StudyVisit, rng: np.random.Generator) -> Volume:
    return visit.series[int(rng.integers(len(visit.series)))]


def stack_series(visit: StudyVisit) -> Volume:
    if len(visit.series) == 1:
        return visit.series[0]
    dims = {s.dims for s in visit.series}
    if len(dims) != 1:
        raise ValueError(f"series dims differ: {sorted(dims)}")
    return Volume(np.concatenate([s.data for s in visit.series]), visit.series[0].spacing)


def intensity_shift_scale(v: Volume, cfg: AugmentConfig, rng: np.random.Generator) -> Volume:
    """``v * a + b * (max - min)`` with ``a ~ U(scale_range)``, ``b ~ U(shift_range)``."""
    if rng.random() >= cfg.p_intensity:
        return v
    a = rng.uniform(*cfg.scale_range)
    b = rng.uniform(*cfg.shift_range)
    span = float(v.data.max() - v.data.min())
    return Volume(v.data * np.float32(a) + np.float32(b * span), v.spacing)


def flip(v: Volume, axis: int) -> Volume:
    return Volume(np.flip(v.data, axis=1 + axis), v.spacing)


def rot90(v: Volume, axis: int, k: int = 1) -> Volume:
    """Rotate by ``k`` quarter turns about spatial ``axis`` (0=z, 1=y, 2=x)."""
    d = v.dims
    if len(set(d)) != 1:
        raise ValueError(f"rotation needs cubic spatial dims, got {d}")
    plane = [1 + a for a in range(3) if a != axis]
    return Volume(np.rot90(v.data, k=k, axes=plane), v.spacing)


def random_flip_rot90(v: Volume, cfg: AugmentConfig, rng: np.random.Generator) -> Volume:
    data = v.data
    for axis in range(3):
        if rng.random() < cfg.p_flip:
            data = np.flip(data, axis=1 + axis)
    if rng.random() < cfg.p_rot90:
        if len(set(v.dims)) != 1:
            raise ValueError(f"rotation needs cubic spatial dims, got {v.dims}")
        axis = int(rng.integers(3))
        k = 1 if rng.random() < 0.5 else -1
        data = np.rot90(data, k=k, axes=[1 + a for a in range(3) if a != axis])
    if data is v.data:
        return v
    return Volume(data, v.spacing)


def augment_view(v: Volume, crop: int, cfg: AugmentConfig, rng: np.random.Generator) -> Volume:
    v = random_crop(v, crop, rng)
    v = intensity_shift_scale(v, cfg, rng)
    return random_flip_rot90(v, cfg, rng)


def multi_crop(visit: StudyVisit, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()):
    """Two global and two local single-channel views of one visit."""
    specs = [ViewSpec(cfg.global_crop, "global")] * 2 + [ViewSpec(cfg.local_crop, "local")] * 2
    views = [augment_view(sample_series(visit, rng), s.crop_size, cfg, rng) for s in specs]
    return tuple(views[:2]), tuple(views[2:])


def sequence_view(visit: StudyVisit, crop: int, cfg: AugmentConfig, rng: np.random.Generator) -> Volume:
    """Single multi-channel training crop, as used for order prediction and fine-tuning."""
    return augment_view(stack_series(visit), crop, cfg, rng)
