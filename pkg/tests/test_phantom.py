from dataclasses import replace

import numpy as np
import pytest
from scipy import ndimage

from pancdetect.errors import DimsTooSmall, InvalidRange
from pancdetect.phantom import (
    BACKGROUND_HU,
    PhantomSpec,
    SpecRanges,
    generate_case,
    generate_dataset,
    matched_control,
)
from pancdetect.volume import COMMON_BILE_DUCT, CT, PANCREAS, PANCREATIC_DUCT


def test_deterministic_bytes():
    spec = PhantomSpec(seed=3)
    a, b = generate_case(spec), generate_case(spec)
    for name in a.x.channel_names:
        assert a.x[name].data.tobytes() == b.x[name].data.tobytes()
    assert a.y.data.tobytes() == b.y.data.tobytes()


def test_different_seeds_differ():
    a, b = generate_case(PhantomSpec(seed=1)), generate_case(PhantomSpec(seed=2))
    assert not np.array_equal(a.x[PANCREAS].data, b.x[PANCREAS].data)


def test_tumor_case_structure(tumor_case):
    c = tumor_case
    assert c.is_tumor_case
    assert c.x.channel_names == (CT, PANCREAS, PANCREATIC_DUCT, COMMON_BILE_DUCT)
    assert c.x[CT].data.dtype == np.float32
    for name in (PANCREAS, PANCREATIC_DUCT, COMMON_BILE_DUCT):
        assert c.x[name].is_binary()
    assert c.y.data.sum() > 10
    assert c.metadata["pancreatic_duct_dilated"] and c.metadata["common_bile_duct_dilated"]


def test_lesion_lies_mostly_in_pancreas(tumor_case):
    lesion = tumor_case.y.data.astype(bool)
    inside = (lesion & tumor_case.x[PANCREAS].data.astype(bool)).sum()
    assert inside / lesion.sum() > 0.8


def test_duct_inside_pancreas_neighbourhood(tumor_case):
    # Every pancreatic duct voxel lies within the dilated duct radius of the gland.
    dist = ndimage.distance_transform_edt(tumor_case.x[PANCREAS].data == 0, sampling=tumor_case.x.spacing)
    duct = tumor_case.x[PANCREATIC_DUCT].data.astype(bool)
    assert dist[duct].max() <= 2.2 * 2.0 + 1e-6


def test_control_case(control_case):
    assert not control_case.is_tumor_case
    assert control_case.y.data.sum() == 0
    assert control_case.metadata["pancreatic_duct_dilated"] is False


def test_tumor_dilates_ducts():
    spec = PhantomSpec(seed=5, noise_sigma=0.0)
    tumor = generate_case(spec)
    control = generate_case(matched_control(spec))
    for duct in (PANCREATIC_DUCT, COMMON_BILE_DUCT):
        t, c = tumor.x[duct].data.astype(bool), control.x[duct].data.astype(bool)
        assert t.sum() > 1.5 * c.sum()
        # Dilation only widens the duct.
        assert np.all(t[c])
    np.testing.assert_array_equal(tumor.x[PANCREAS].data, control.x[PANCREAS].data)


def test_matched_control_differs_only_near_lesion_and_ducts():
    spec = PhantomSpec(seed=8)
    tumor, control = generate_case(spec), generate_case(matched_control(spec))
    changed = tumor.x[CT].data != control.x[CT].data
    region = (
        tumor.y.data.astype(bool)
        | tumor.x[PANCREATIC_DUCT].data.astype(bool)
        | tumor.x[COMMON_BILE_DUCT].data.astype(bool)
    )
    assert changed.any()
    assert not np.any(changed & ~region)


def test_tumor_is_hypodense():
    spec = PhantomSpec(seed=4, noise_sigma=0.0)
    c = generate_case(spec)
    lesion = c.y.data.astype(bool)
    assert np.all(c.x[CT].data[lesion] == pytest.approx(100 + spec.tumor_contrast))
    outside = ~(lesion | c.x[PANCREAS].data.astype(bool) | c.x[COMMON_BILE_DUCT].data.astype(bool))
    assert np.all(c.x[CT].data[outside] == BACKGROUND_HU)


def test_control_needs_normal_ducts():
    with pytest.raises(ValueError):
        PhantomSpec(tumor_present=False, duct_dilation_factor=2.0)
    PhantomSpec(tumor_present=False, duct_dilation_factor=2.0, override_control_dilation=True)


def test_dims_too_small():
    with pytest.raises(DimsTooSmall):
        generate_case(PhantomSpec(dims=(8, 8, 8)))


def test_generate_dataset_counts_and_order():
    cases = generate_dataset(3, 2, seed=9)
    assert [c.is_tumor_case for c in cases] == [True] * 3 + [False] * 2
    assert [c.case_id for c in cases] == [f"case_{i:04d}" for i in range(5)]
    again = generate_dataset(3, 2, seed=9)
    for a, b in zip(cases, again):
        assert a.x[CT].data.tobytes() == b.x[CT].data.tobytes()


def test_spec_ranges_validation():
    with pytest.raises(InvalidRange):
        replace(SpecRanges(), tumor_radius=(5.0, 3.0)).validate()
    with pytest.raises(InvalidRange):
        replace(SpecRanges(), mimic_probability=1.5).validate()
    with pytest.raises(InvalidRange):
        SpecRanges.from_dict({"nonsense": 1})
    with pytest.raises(InvalidRange):
        generate_dataset(-1, 2)
