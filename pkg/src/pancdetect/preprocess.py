"""Resampling, CT normalization, pancreas-centered cropping, and channel
assembly for the three input modes.

The full pipeline is resample -> normalize -> crop; channel assembly
happens at training time so every input mode reads the same crops.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyMask,
    InvalidConfig,
    InvalidSpacing,
    MissingChannel,
    MissingDilationFlag,
    ShapeMismatch,
    ZeroVariance,
)
from .volume import (
    ANATOMY_CHANNELS,
    COMMON_BILE_DUCT,
    CT,
    MASK_CHANNELS,
    PANCREAS,
    PANCREATIC_DUCT,
    LabeledCase,
    MultiChannelVolume,
    Volume3D,
    center_of_mass,
)

INPUT_MODES = ("ct_only", "binary_ducts", "full")
DILATION_FLAGS = {
    PANCREATIC_DUCT: "pancreatic_duct_dilated",
    COMMON_BILE_DUCT: "common_bile_duct_dilated",
}


@dataclass
class PreprocessConfig:
    target_spacing: tuple | None = (2.0, 2.0, 2.0)
    crop_dims: tuple = (192, 256, 256)
    clip_percentiles: tuple = (0.5, 99.5)
    input_mode: str = "full"

    def __post_init__(self):
        if self.target_spacing is not None:
            self.target_spacing = tuple(float(s) for s in self.target_spacing)
            if len(self.target_spacing) != 3 or min(self.target_spacing) <= 0:
                raise InvalidConfig(f"target_spacing must be 3 positive values, got {self.target_spacing}")
        self.crop_dims = tuple(int(d) for d in self.crop_dims)
        if len(self.crop_dims) != 3 or min(self.crop_dims) < 1:
            raise InvalidConfig(f"crop_dims must be 3 values >= 1, got {self.crop_dims}")
        self.clip_percentiles = tuple(float(p) for p in self.clip_percentiles)
        lo, hi = self.clip_percentiles
        if not 0.0 <= lo <= hi <= 100.0:
            raise InvalidConfig(f"clip_percentiles must be ordered within [0, 100], got {self.clip_percentiles}")
        if self.input_mode not in INPUT_MODES:
            raise InvalidConfig(f"input_mode must be one of {INPUT_MODES}, got {self.input_mode!r}")


def _axis_weights(n_out, scale, n_in):
    coords = np.clip(np.arange(n_out) * scale, 0.0, n_in - 1)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, coords - lo


def resample(v: Volume3D, target_spacing, interpolation="trilinear") -> Volume3D:
    """Resample onto a grid with ``target_spacing`` sharing the same origin.

    Output voxel ``i`` sits at physical offset ``i * target_spacing``;
    samples past the last input voxel take the edge value. Trilinear
    interpolation is applied separably, one axis at a time.
    """
    target = np.asarray(target_spacing, dtype=float)
    spacing = np.asarray(v.spacing, dtype=float)
    if target.shape != (3,) or np.any(target <= 0) or np.any(spacing <= 0):
        raise InvalidSpacing(f"spacings must be positive 3-vectors: {v.spacing} -> {target_spacing}")
    if interpolation not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    if np.array_equal(target, spacing):
        return v.with_data(v.data.copy())

    in_dims = np.asarray(v.shape)
    out_dims = np.maximum(1, np.round(in_dims * spacing / target).astype(int))
    data = v.data
    for axis in range(3):
        scale = target[axis] / spacing[axis]
        lo, hi, frac = _axis_weights(out_dims[axis], scale, in_dims[axis])
        if interpolation == "nearest":
            idx = np.where(frac >= 0.5, hi, lo)
            data = np.take(data, idx, axis=axis)
        else:
            shape = [1, 1, 1]
            shape[axis] = -1
            w = frac.reshape(shape)
            a = np.take(data, lo, axis=axis).astype(np.float64)
            b = np.take(data, hi, axis=axis).astype(np.float64)
            data = a + (b - a) * w
    if interpolation == "trilinear" and np.issubdtype(v.data.dtype, np.floating):
        data = data.astype(v.data.dtype)
    return Volume3D(data, tuple(target), v.origin)


def normalize_ct(v: Volume3D, foreground, clip_percentiles=(0.5, 99.5), return_stats=False):
    """Clip to foreground percentiles, then z-score with foreground stats.

    With ``return_stats`` the tuple ``(volume, stats)`` is returned, where
    ``stats`` holds the clip bounds and the mean/std used.
    """
    fg = foreground.data if isinstance(foreground, Volume3D) else np.asarray(foreground)
    if fg.shape != v.shape:
        raise ShapeMismatch(f"foreground shape {fg.shape} != volume shape {v.shape}")
    fg = fg != 0
    if not fg.any():
        raise EmptyMask("normalize_ct needs a non-empty foreground")
    data = v.data.astype(np.float64)
    lo, hi = np.percentile(data[fg], clip_percentiles)
    clipped = np.clip(data, lo, hi)
    values = clipped[fg]
    mean = values.mean()
    std = values.std()
    if std == 0:
        raise ZeroVariance("foreground intensities have zero variance after clipping")
    out = ((clipped - mean) / std).astype(np.float32)
    result = v.with_data(out)
    if return_stats:
        return result, {"clip_low": float(lo), "clip_high": float(hi), "mean": float(mean), "std": float(std)}
    return result


def round_half_away(x):
    x = np.asarray(x, dtype=float)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(int)


def crop_window(com, dims, crop_dims):
    """Start index per axis: clamp(round(com - crop/2), 0, dims - crop)."""
    start = round_half_away(np.asarray(com) - np.asarray(crop_dims) / 2.0)
    return np.clip(start, 0, np.asarray(dims) - np.asarray(crop_dims))


def _background(name, data):
    # CT pads with its own minimum, which after clipping is the clip floor.
    return float(data.min()) if name == CT else 0


def _pad_to(data, pad_before, crop_dims, value):
    pads = [(int(b), int(max(0, c - d - b))) for b, c, d in zip(pad_before, crop_dims, data.shape)]
    if not any(p for pair in pads for p in pair):
        return data
    return np.pad(data, pads, mode="constant", constant_values=value)


def crop_around(case: LabeledCase, crop_dims) -> LabeledCase:
    """Crop every channel and the label to ``crop_dims`` around the pancreas
    center of mass. Axes shorter than the crop are padded symmetrically
    first (extra voxel after)."""
    crop_dims = np.asarray(crop_dims, dtype=int)
    dims = np.asarray(case.shape)
    com = center_of_mass(case.x[PANCREAS])
    pad_before = np.maximum(0, crop_dims - dims) // 2
    padded_dims = np.maximum(dims, crop_dims)
    start = crop_window(com + pad_before, padded_dims, crop_dims)
    sl = tuple(slice(int(s), int(s + c)) for s, c in zip(start, crop_dims))

    spacing = np.asarray(case.x.spacing)
    origin = tuple(np.asarray(case.x.origin) + (start - pad_before) * spacing)

    def crop(name, vol):
        data = _pad_to(vol.data, pad_before, crop_dims, _background(name, vol.data))[sl]
        return Volume3D(np.ascontiguousarray(data), vol.spacing, origin)

    channels = tuple(crop(n, ch) for n, ch in zip(case.x.channel_names, case.x.channels))
    y = crop("label", case.y)
    window = [[int(s - p), int(s - p + c)] for s, p, c in zip(start, pad_before, crop_dims)]
    meta = dict(case.metadata, crop_window=window, crop_pad=[int(p) for p in pad_before])
    return LabeledCase(
        x=MultiChannelVolume(channels, case.x.channel_names),
        y=y,
        case_id=case.case_id,
        is_tumor_case=bool(y.data.any()),
        metadata=meta,
    )


def assemble_input(case: LabeledCase, mode: str) -> LabeledCase:
    """Select/replace channels for one of the three input modes."""
    if mode not in INPUT_MODES:
        raise InvalidConfig(f"input_mode must be one of {INPUT_MODES}, got {mode!r}")
    for name in ANATOMY_CHANNELS if mode != "ct_only" else (CT,):
        if name not in case.x:
            raise MissingChannel(f"{case.case_id}: channel {name!r} required for mode {mode}")
    if mode == "ct_only":
        x = MultiChannelVolume((case.x[CT],), (CT,))
    elif mode == "full":
        x = MultiChannelVolume(tuple(case.x[n] for n in ANATOMY_CHANNELS), ANATOMY_CHANNELS)
    else:
        channels = [case.x[CT], case.x[PANCREAS]]
        for duct in (PANCREATIC_DUCT, COMMON_BILE_DUCT):
            key = DILATION_FLAGS[duct]
            if key not in case.metadata:
                raise MissingDilationFlag(f"{case.case_id}: metadata lacks {key!r}")
            ref = case.x[duct]
            fill = 1 if case.metadata[key] else 0
            channels.append(ref.with_data(np.full(ref.shape, fill, dtype=np.uint8)))
        x = MultiChannelVolume(tuple(channels), ANATOMY_CHANNELS)
    return case.replace(x=x)


def preprocess_case(case: LabeledCase, config: PreprocessConfig) -> LabeledCase:
    """Resample, normalize the CT channel over the anatomy foreground, and
    crop. Channel assembly is left to :func:`assemble_input`."""
    channels = []
    names = case.x.channel_names
    y = case.y
    if config.target_spacing is not None:
        for name, ch in zip(names, case.x.channels):
            method = "trilinear" if name == CT else "nearest"
            channels.append(resample(ch, config.target_spacing, method))
        y = resample(y, config.target_spacing, "nearest")
    else:
        channels = list(case.x.channels)

    x = MultiChannelVolume(tuple(channels), names)
    masks = [x[n].data != 0 for n in MASK_CHANNELS if n in x]
    if not masks:
        raise MissingChannel(f"{case.case_id}: no anatomy masks to define the CT foreground")
    foreground = np.logical_or.reduce(masks)
    ct, stats = normalize_ct(x[CT], foreground, config.clip_percentiles, return_stats=True)
    channels = [ct if n == CT else ch for n, ch in zip(names, channels)]
    resampled = LabeledCase(
        x=MultiChannelVolume(tuple(channels), names),
        y=y,
        case_id=case.case_id,
        is_tumor_case=bool(y.data.any()),
        metadata=dict(case.metadata, ct_norm=stats),
    )
    return crop_around(resampled, config.crop_dims)
