"""Training-time augmentation for labeled cases.

Geometric transforms (flip, rotation, elastic deformation) move every
channel and the label together; masks and the label are resampled with
nearest-neighbour lookup so they stay binary. Intensity transforms
(contrast, Gaussian and Poisson-like noise) only touch the CT channel.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import InvalidConfig
from .volume import CT, LabeledCase, MultiChannelVolume

# Offset that turns HU into a non-negative "photon count" proxy.
_HU_OFFSET = 1000.0


@dataclass
class AugmentPolicy:
    """Augmentation magnitudes.

    ``contrast_range`` is the relative change of the CT contrast: the
    factor applied around the volume mean is ``1 + delta``. Noise sigmas are
    in normalized-intensity units; ``poisson_scale_range`` scales the
    signal-dependent variance on de-normalized (HU) intensities.
    """

    p_flip: tuple = (0.5, 0.5, 0.5)
    rotation_max_degrees: tuple = (15.0, 15.0, 15.0)
    elastic_spacing_mm: float = 32.0
    elastic_max_displacement_mm: float = 4.0
    contrast_range: tuple = (-0.1, 0.1)
    gauss_sigma_range: tuple = (0.0, 0.1)
    poisson_scale_range: tuple = (0.0, 0.1)
    seed: int = 0

    def __post_init__(self):
        self.p_flip = tuple(float(p) for p in self.p_flip)
        self.rotation_max_degrees = tuple(float(a) for a in self.rotation_max_degrees)
        for name in ("contrast_range", "gauss_sigma_range", "poisson_scale_range"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        if len(self.p_flip) != 3 or not all(0.0 <= p <= 1.0 for p in self.p_flip):
            raise InvalidConfig(f"p_flip needs 3 probabilities in [0, 1], got {self.p_flip}")
        if len(self.rotation_max_degrees) != 3 or min(self.rotation_max_degrees) < 0:
            raise InvalidConfig("rotation_max_degrees needs 3 non-negative angles")
        if self.elastic_spacing_mm <= 0 or self.elastic_max_displacement_mm < 0:
            raise InvalidConfig("elastic spacing must be > 0 and displacement >= 0")
        for name in ("contrast_range", "gauss_sigma_range", "poisson_scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidConfig(f"{name} is inverted: {(lo, hi)}")
        if self.contrast_range[0] <= -1:
            raise InvalidConfig("contrast_range must keep the factor 1 + delta positive")
        if self.gauss_sigma_range[0] < 0 or self.poisson_scale_range[0] < 0:
            raise InvalidConfig("noise ranges must be non-negative")

    @classmethod
    def identity(cls, seed=0):
        return cls(
            p_flip=(0.0, 0.0, 0.0),
            rotation_max_degrees=(0.0, 0.0, 0.0),
            elastic_max_displacement_mm=0.0,
            contrast_range=(0.0, 0.0),
            gauss_sigma_range=(0.0, 0.0),
            poisson_scale_range=(0.0, 0.0),
            seed=seed,
        )

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown augment keys: {sorted(unknown)}")
        return cls(**d)


def _rotation(angles_deg):
    a, b, c = np.deg2rad(angles_deg)
    rz = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    rx = np.array([[np.cos(b), 0, np.sin(b)], [0, 1, 0], [-np.sin(b), 0, np.cos(b)]])
    ry = np.array([[np.cos(c), -np.sin(c), 0], [np.sin(c), np.cos(c), 0], [0, 0, 1]])
    return rz @ rx @ ry


def _sample_coords(shape, spacing, angles, control_disp):
    """Source voxel coordinates for each output voxel, shape (3, Z, X, Y)."""
    spacing = np.asarray(spacing, dtype=float)
    center = (np.asarray(shape) - 1) / 2.0
    grid = np.indices(shape, dtype=np.float64).reshape(3, -1)
    mm = (grid - center[:, None]) * spacing[:, None]
    src = _rotation(angles).T @ mm
    if control_disp is not None:
        coarse = np.asarray(control_disp.shape[1:])
        pos = grid * ((coarse - 1) / np.maximum(np.asarray(shape) - 1, 1))[:, None]
        for axis in range(3):
            src[axis] += map_coordinates(control_disp[axis], pos, order=3, mode="nearest")
    return (src / spacing[:, None] + center[:, None]).reshape((3,) + tuple(shape))


def _draw(policy, shape, spacing, rng):
    flips = rng.uniform(size=3) < np.asarray(policy.p_flip)
    angles = rng.uniform(-1.0, 1.0, size=3) * np.asarray(policy.rotation_max_degrees)
    extent = np.asarray(shape) * np.asarray(spacing)
    coarse = np.maximum(2, np.ceil(extent / policy.elastic_spacing_mm).astype(int) + 1)
    disp = rng.uniform(-1.0, 1.0, size=(3, *coarse)) * policy.elastic_max_displacement_mm
    return {
        "flips": flips,
        "angles": angles,
        "disp": disp if policy.elastic_max_displacement_mm > 0 else None,
        "contrast": rng.uniform(*policy.contrast_range),
        "sigma": rng.uniform(*policy.gauss_sigma_range),
        "poisson": rng.uniform(*policy.poisson_scale_range),
    }


def _intensity(ct, draw, norm, rng):
    out = ct.astype(np.float64)
    if draw["contrast"] != 0:
        mean = out.mean()
        out = mean + (out - mean) * (1.0 + draw["contrast"])
    if draw["poisson"] > 0:
        mu, sd = (norm["mean"], norm["std"]) if norm else (0.0, 1.0)
        hu = out * sd + mu
        var = draw["poisson"] * np.maximum(hu + _HU_OFFSET, 0.0)
        hu = hu + np.sqrt(var) * rng.standard_normal(out.shape)
        out = (hu - mu) / sd
    if draw["sigma"] > 0:
        out = out + draw["sigma"] * rng.standard_normal(out.shape)
    return out.astype(ct.dtype)


def augment_case(case: LabeledCase, policy: AugmentPolicy, draw_seed: int) -> LabeledCase:
    """Apply one random draw of ``policy``; deterministic in ``draw_seed``."""
    rng = np.random.default_rng([int(policy.seed), int(draw_seed)])
    shape, spacing = case.shape, case.x.spacing
    draw = _draw(policy, shape, spacing, rng)

    coords = None
    if np.any(draw["angles"] != 0) or draw["disp"] is not None:
        coords = _sample_coords(shape, spacing, draw["angles"], draw["disp"])
    flip_axes = tuple(int(a) for a in np.flatnonzero(draw["flips"]))

    def geometric(data, linear):
        if coords is not None:
            data = map_coordinates(data, coords, order=1 if linear else 0, mode="nearest").astype(data.dtype)
        if flip_axes:
            data = np.ascontiguousarray(np.flip(data, axis=flip_axes))
        return data

    channels = []
    for name, ch in zip(case.x.channel_names, case.x.channels):
        data = geometric(ch.data, linear=name == CT)
        if name == CT:
            data = _intensity(data, draw, case.metadata.get("ct_norm"), rng)
        channels.append(ch.with_data(data))
    y = case.y.with_data(geometric(case.y.data, linear=False))
    return LabeledCase(
        x=MultiChannelVolume(tuple(channels), case.x.channel_names),
        y=y,
        case_id=case.case_id,
        is_tumor_case=bool(y.data.any()),
        metadata=case.metadata,
    )
