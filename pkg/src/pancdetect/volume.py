"""Volumetric primitives: grids, multi-channel stacks, labeled cases, and
the mask kernels (center of mass, Dice, overlap) used everywhere else.

Axis order is always (z, x, y).
"""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmptyMask, MissingChannel, ShapeMismatch

CT = "ct"
PANCREAS = "pancreas"
PANCREATIC_DUCT = "pancreatic_duct"
COMMON_BILE_DUCT = "common_bile_duct"
ANATOMY_CHANNELS = (CT, PANCREAS, PANCREATIC_DUCT, COMMON_BILE_DUCT)
MASK_CHANNELS = (PANCREAS, PANCREATIC_DUCT, COMMON_BILE_DUCT)


def _vec3(values, name):
    vec = tuple(float(v) for v in values)
    if len(vec) != 3:
        raise ValueError(f"{name} must have 3 components, got {values!r}")
    return vec


@dataclass(frozen=True, eq=False)
class Volume3D:
    """A scalar 3D grid with voxel spacing and origin in mm."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeMismatch(f"Volume3D needs a non-empty 3D array, got shape {data.shape}")
        spacing = _vec3(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _vec3(self.origin, "origin"))

    @property
    def shape(self):
        return self.data.shape

    def is_binary(self):
        return bool(np.isin(self.data, (0, 1)).all())

    def with_data(self, data, **changes):
        return replace(self, data=data, **changes)

    def same_grid(self, other):
        return (
            self.shape == other.shape
            and np.allclose(self.spacing, other.spacing)
            and np.allclose(self.origin, other.origin)
        )


@dataclass(frozen=True, eq=False)
class MultiChannelVolume:
    """Ordered channels that share one grid."""

    channels: tuple
    channel_names: tuple

    def __post_init__(self):
        channels = tuple(self.channels)
        names = tuple(self.channel_names)
        if len(channels) != len(names):
            raise ShapeMismatch(f"{len(channels)} channels but {len(names)} names")
        if not channels:
            raise ShapeMismatch("at least one channel is required")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate channel names: {names}")
        ref = channels[0]
        for name, ch in zip(names, channels):
            if not ref.same_grid(ch):
                raise ShapeMismatch(f"channel {name!r} is not on the grid of channel {names[0]!r}")
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "channel_names", names)

    @property
    def shape(self):
        return self.channels[0].shape

    @property
    def spacing(self):
        return self.channels[0].spacing

    @property
    def origin(self):
        return self.channels[0].origin

    def __len__(self):
        return len(self.channels)

    def __contains__(self, name):
        return name in self.channel_names

    def __getitem__(self, name) -> Volume3D:
        try:
            return self.channels[self.channel_names.index(name)]
        except ValueError:
            raise MissingChannel(f"no channel {name!r} (have {list(self.channel_names)})") from None

    def as_array(self, dtype=np.float32):
        """Stack into a (C, Z, X, Y) array."""
        return np.stack([ch.data.astype(dtype, copy=False) for ch in self.channels])


@dataclass(frozen=True, eq=False)
class LabeledCase:
    """Multi-channel input ``x`` plus binary tumor label ``y``."""

    x: MultiChannelVolume
    y: Volume3D
    case_id: str
    is_tumor_case: bool
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.y.shape != self.x.shape:
            raise ShapeMismatch(
                f"{self.case_id}: label shape {self.y.shape} != input shape {self.x.shape}"
            )
        has_tumor = bool(np.any(self.y.data))
        if bool(self.is_tumor_case) != has_tumor:
            raise ValueError(
                f"{self.case_id}: is_tumor_case={self.is_tumor_case} but label has "
                f"{int(np.count_nonzero(self.y.data))} tumor voxels"
            )
        object.__setattr__(self, "is_tumor_case", has_tumor)

    @property
    def shape(self):
        return self.x.shape

    def replace(self, **changes) -> LabeledCase:
        return replace(self, **changes)


def _as_array(v):
    return v.data if isinstance(v, Volume3D) else np.asarray(v)


def _pair(a, b):
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch: {a.shape} vs {b.shape}")
    return a != 0, b != 0


def center_of_mass(mask) -> np.ndarray:
    """Unweighted mean (z, x, y) voxel coordinate of the nonzero voxels."""
    arr = _as_array(mask)
    idx = np.argwhere(arr != 0)
    if idx.size == 0:
        raise EmptyMask("center_of_mass of an all-zero mask")
    return idx.mean(axis=0)


def dice(a, b) -> float:
    """Sorensen-Dice overlap 2|A∩B|/(|A|+|B|); 1.0 when both masks are empty."""
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def overlaps(a, b) -> bool:
    """True if at least one voxel is set in both masks."""
    a, b = _pair(a, b)
    return bool(np.logical_and(a, b).any())


def stack_channels(volumes: Sequence[Volume3D], names: Sequence[str]) -> MultiChannelVolume:
    return MultiChannelVolume(tuple(volumes), tuple(names))


def binary_volume(data, like: Volume3D) -> Volume3D:
    return Volume3D(np.asarray(data, dtype=np.uint8), like.spacing, like.origin)

