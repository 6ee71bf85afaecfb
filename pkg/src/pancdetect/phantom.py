"""Synthetic abdominal phantoms with a pancreatic-head tumor model.

Anatomy is analytic and expressed in mm around the volume center:

* pancreas: a curved tube from head (t=0) to tail (t=1) whose radius
  tapers from 10 mm to 6 mm;
* pancreatic duct: a thin tube on the pancreas centerline;
* common bile duct: a tube rising from the papilla in the head;
* tumor: a sphere in the head, rendered hypodense in the CT channel.

A tumor widens both ducts upstream of the obstruction (tail side for the
pancreatic duct, liver side for the bile duct) by ``duct_dilation_factor``.
Control cases may carry a *mimic*: the same hypodense blob without the
label and without duct changes, standing in for pancreatitis-like
lookalikes. The mimic is what keeps CT-only detection ambiguous.

A voxel belongs to a shape when its center lies inside the analytic
surface; there is no anti-aliasing.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimsTooSmall, InvalidRange
from .seeding import derive_seed
from .volume import (
    COMMON_BILE_DUCT,
    CT,
    PANCREAS,
    PANCREATIC_DUCT,
    LabeledCase,
    MultiChannelVolume,
    Volume3D,
)

BACKGROUND_HU = 30.0
PANCREAS_HU = 100.0
# bile duct radius relative to the pancreatic duct
CBD_RADIUS_RATIO = 1.5
_JITTER_MM = 4.0
_CENTERLINE_SAMPLES = 512


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (40, 56, 56)
    spacing: tuple = (2.0, 2.0, 2.0)
    tumor_present: bool = True
    tumor_radius: float = 5.5
    tumor_contrast: float = -30.0
    duct_dilation_factor: float = 2.2
    base_duct_radius: float = 2.0
    noise_sigma: float = 20.0
    seed: int = 0
    mimic_present: bool = False
    duct_contrast: float = -8.0
    override_control_dilation: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.dims) != 3 or len(self.spacing) != 3:
            raise ValueError("dims and spacing need 3 components")
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if (self.tumor_present or self.mimic_present) and self.tumor_radius <= 0:
            raise ValueError("tumor_radius must be > 0 when a tumor or mimic is rendered")
        if self.duct_dilation_factor < 1:
            raise ValueError("duct_dilation_factor must be >= 1")
        if (
            not self.tumor_present
            and self.duct_dilation_factor != 1
            and not self.override_control_dilation
        ):
            raise ValueError(
                "control anatomy needs duct_dilation_factor == 1 "
                "(set override_control_dilation for confounder studies)"
            )
        if self.base_duct_radius <= 0 or self.noise_sigma < 0:
            raise ValueError("base_duct_radius must be > 0 and noise_sigma >= 0")

    @property
    def ducts_dilated(self):
        return self.duct_dilation_factor > 1


@dataclass(frozen=True)
class _Anatomy:
    centerline: np.ndarray  # (N, 3) mm, head -> tail
    t: np.ndarray  # (N,)
    cbd: np.ndarray  # (M, 3) mm, papilla -> liver
    s: np.ndarray  # (M,)
    lesion_center: np.ndarray
    lesion_t: float


def pancreas_radius(t):
    return 10.0 - 4.0 * np.asarray(t, dtype=float)


def _draw_anatomy(rng):
    # every draw happens whether or not a lesion is rendered, so tumor and
    # control renders from one seed share anatomy and noise.
    shift = rng.uniform(-_JITTER_MM, _JITTER_MM, size=3)
    bend = rng.uniform(6.0, 10.0)
    rise = rng.uniform(6.0, 10.0)
    t = np.linspace(0.0, 1.0, _CENTERLINE_SAMPLES)
    centerline = np.stack(
        [
            -4.0 + rise * t,
            -28.0 + 60.0 * t,
            bend * np.sin(np.pi * t) - bend / 2.0,
        ],
        axis=1,
    ) + shift

    papilla = centerline[int(0.03 * (_CENTERLINE_SAMPLES - 1))] + np.array([-2.0, 0.0, 0.0])
    cbd_dir = np.array([22.0, rng.uniform(2.0, 6.0), rng.uniform(-6.0, -2.0)])
    s = np.linspace(0.0, 1.0, _CENTERLINE_SAMPLES // 2)
    cbd = papilla + s[:, None] * cbd_dir

    lesion_t = rng.uniform(0.06, 0.16)
    k = int(round(lesion_t * (_CENTERLINE_SAMPLES - 1)))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    offset = direction * rng.uniform(0.0, 0.4) * pancreas_radius(lesion_t)
    return _Anatomy(centerline, t, cbd, s, centerline[k] + offset, float(t[k]))


def _voxel_centers(dims, spacing):
    origin = -(np.asarray(dims) - 1) / 2.0 * np.asarray(spacing)
    axes = [origin[i] + np.arange(dims[i]) * spacing[i] for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3), origin


def _tube(points, curve, radius_of_param, param, max_radius):
    """Voxel centers within radius(param at nearest curve sample) of a curve."""
    tree = cKDTree(curve)
    dist, idx = tree.query(points, distance_upper_bound=max_radius + 1e-6)
    inside = np.isfinite(dist)
    out = np.zeros(len(points), dtype=bool)
    out[inside] = dist[inside] <= radius_of_param(param[idx[inside]])
    return out


def _projection_param(curve, param, point):
    return float(param[np.argmin(np.linalg.norm(curve - point, axis=1))])


def _check_fits(spec, anatomy, origin):
    half = -origin + np.asarray(spec.spacing) / 2.0
    f = spec.duct_dilation_factor
    cbd_r = spec.base_duct_radius * CBD_RADIUS_RATIO * f
    lo = np.min(
        [
            (anatomy.centerline - pancreas_radius(anatomy.t)[:, None]).min(axis=0),
            (anatomy.cbd - cbd_r).min(axis=0),
            anatomy.lesion_center - spec.tumor_radius,
        ],
        axis=0,
    )
    hi = np.max(
        [
            (anatomy.centerline + pancreas_radius(anatomy.t)[:, None]).max(axis=0),
            (anatomy.cbd + cbd_r).max(axis=0),
            anatomy.lesion_center + spec.tumor_radius,
        ],
        axis=0,
    )
    if np.any(lo < -half) or np.any(hi > half):
        need = np.ceil(2 * np.maximum(-lo, hi) / np.asarray(spec.spacing)).astype(int)
        raise DimsTooSmall(
            f"dims {spec.dims} at spacing {spec.spacing} cannot hold the anatomy; "
            f"need at least {tuple(int(n) for n in need)} voxels"
        )


def generate_case(spec: PhantomSpec, case_id=None) -> LabeledCase:
    """Render one phantom case; deterministic in ``spec``."""
    geom_seq, noise_seq = np.random.SeedSequence(spec.seed).spawn(2)
    anatomy = _draw_anatomy(np.random.default_rng(geom_seq))
    points, origin = _voxel_centers(spec.dims, spec.spacing)
    _check_fits(spec, anatomy, origin)

    dilate = spec.duct_dilation_factor
    pd_cut = _projection_param(anatomy.centerline, anatomy.t, anatomy.lesion_center)
    cbd_cut = _projection_param(anatomy.cbd, anatomy.s, anatomy.lesion_center)
    r_pd = spec.base_duct_radius
    r_cbd = spec.base_duct_radius * CBD_RADIUS_RATIO

    pancreas = _tube(points, anatomy.centerline, pancreas_radius, anatomy.t, 10.0)
    duct_t = anatomy.t
    pd_span = (duct_t >= 0.02) & (duct_t <= 0.95)
    pduct = _tube(
        points,
        anatomy.centerline[pd_span],
        lambda t: np.where(t > pd_cut, r_pd * dilate, r_pd),
        duct_t[pd_span],
        r_pd * dilate,
    )
    cbd = _tube(
        points,
        anatomy.cbd,
        lambda s: np.where(s > cbd_cut, r_cbd * dilate, r_cbd),
        anatomy.s,
        r_cbd * dilate,
    )
    lesion = np.linalg.norm(points - anatomy.lesion_center, axis=1) <= spec.tumor_radius

    ct = np.full(len(points), BACKGROUND_HU)
    ct[pancreas] = PANCREAS_HU
    ct[cbd & ~pancreas] = BACKGROUND_HU + spec.duct_contrast
    ct[pduct | (cbd & pancreas)] = PANCREAS_HU + spec.duct_contrast
    if spec.tumor_present or spec.mimic_present:
        ct[lesion] = PANCREAS_HU + spec.tumor_contrast
    noise = np.random.default_rng(noise_seq).normal(0.0, 1.0, size=len(points))
    ct = (ct + spec.noise_sigma * noise).astype(np.float32)

    label = lesion if spec.tumor_present else np.zeros_like(lesion)

    def vol(flat, dtype):
        return Volume3D(flat.reshape(spec.dims).astype(dtype), spec.spacing, tuple(origin))

    x = MultiChannelVolume(
        (vol(ct, np.float32), vol(pancreas, np.uint8), vol(pduct, np.uint8), vol(cbd, np.uint8)),
        (CT, PANCREAS, PANCREATIC_DUCT, COMMON_BILE_DUCT),
    )
    metadata = {
        "source": "phantom",
        "phantom": spec_to_dict(spec),
        "pancreatic_duct_dilated": spec.ducts_dilated,
        "common_bile_duct_dilated": spec.ducts_dilated,
        "lesion_center_mm": [float(c) for c in anatomy.lesion_center],
        "lesion_t": anatomy.lesion_t,
    }
    return LabeledCase(
        x=x,
        y=vol(label, np.uint8),
        case_id=case_id or f"phantom_{spec.seed}",
        is_tumor_case=bool(label.any()),
        metadata=metadata,
    )


def spec_to_dict(spec: PhantomSpec) -> dict:
    d = asdict(spec)
    d["dims"] = list(spec.dims)
    d["spacing"] = list(spec.spacing)
    return d


@dataclass(frozen=True)
class SpecRanges:
    """Uniform sampling ranges for :func:`generate_dataset`.

    ``duct_dilation_factor`` applies to tumor cases only; controls keep
    normal ducts. ``mimic_probability`` is the chance that a control case
    carries a hypodense lookalike blob.
    """

    dims: tuple = (40, 56, 56)
    spacing: tuple = (2.0, 2.0, 2.0)
    tumor_radius: tuple = (6.0, 10.0)
    tumor_contrast: tuple = (-60.0, -40.0)
    duct_dilation_factor: tuple = (2.5, 3.5)
    base_duct_radius: tuple = (1.8, 2.2)
    noise_sigma: tuple = (15.0, 25.0)
    duct_contrast: tuple = (-10.0, -6.0)
    mimic_probability: float = 0.7

    _RANGE_FIELDS = (
        "tumor_radius",
        "tumor_contrast",
        "duct_dilation_factor",
        "base_duct_radius",
        "noise_sigma",
        "duct_contrast",
    )

    def validate(self):
        for name in self._RANGE_FIELDS:
            rng = getattr(self, name)
            try:
                lo, hi = (float(v) for v in rng)
            except (TypeError, ValueError):
                raise InvalidRange(f"{name}: expected a (low, high) pair, got {rng!r}") from None
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise InvalidRange(f"{name}: empty or inverted range {rng!r}")
        if self.duct_dilation_factor[0] < 1:
            raise InvalidRange("duct_dilation_factor range must lie in [1, inf)")
        if self.tumor_radius[0] <= 0:
            raise InvalidRange("tumor_radius range must be positive")
        if not 0.0 <= self.mimic_probability <= 1.0:
            raise InvalidRange(f"mimic_probability {self.mimic_probability} outside [0, 1]")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidRange(f"unknown phantom range keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def sample_spec(ranges: SpecRanges, tumor_present: bool, seed: int) -> PhantomSpec:
    rng = np.random.default_rng(seed)

    def u(name):
        lo, hi = getattr(ranges, name)
        return float(rng.uniform(lo, hi))

    params = {name: u(name) for name in SpecRanges._RANGE_FIELDS}
    mimic = bool(rng.uniform() < ranges.mimic_probability)
    if not tumor_present:
        params["duct_dilation_factor"] = 1.0
    return PhantomSpec(
        dims=ranges.dims,
        spacing=ranges.spacing,
        tumor_present=tumor_present,
        mimic_present=mimic and not tumor_present,
        seed=derive_seed(seed, "render"),
        **params,
    )


def generate_dataset(n_tumor, n_control, spec_ranges=None, seed=0):
    """Generate ``n_tumor`` tumor cases followed by ``n_control`` controls.

    Case ``i`` is rendered from a seed derived from ``(seed, i)`` only, so
    cases can be produced in any order or in parallel.
    """
    if n_tumor < 0 or n_control < 0:
        raise InvalidRange("case counts must be non-negative")
    ranges = spec_ranges or SpecRanges()
    ranges.validate()
    cases = []
    for i in range(n_tumor + n_control):
        spec = sample_spec(ranges, tumor_present=i < n_tumor, seed=derive_seed(seed, "case", i))
        cases.append(generate_case(spec, case_id=f"case_{i:04d}"))
    return cases


def matched_control(spec: PhantomSpec) -> PhantomSpec:
    """The control render sharing anatomy and noise with ``spec``."""
    return replace(spec, tumor_present=False, mimic_present=False, duct_dilation_factor=1.0)
