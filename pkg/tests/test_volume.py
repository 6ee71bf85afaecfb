import numpy as np
import oracles
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pancdetect.errors import EmptyMask, MissingChannel, ShapeMismatch
from pancdetect.volume import (
    LabeledCase,
    MultiChannelVolume,
    Volume3D,
    center_of_mass,
    dice,
    overlaps,
    stack_channels,
)

shapes = st.tuples(*[st.integers(1, 6)] * 3)
masks = shapes.flatmap(lambda s: arrays(np.uint8, s, elements=st.integers(0, 1)))
mask_pairs = shapes.flatmap(
    lambda s: st.tuples(
        arrays(np.uint8, s, elements=st.integers(0, 1)),
        arrays(np.uint8, s, elements=st.integers(0, 1)),
    )
)


def test_dice_examples():
    a = np.zeros((2, 2, 2), np.uint8)
    a[0, 0, 0] = a[0, 0, 1] = 1
    b = np.zeros_like(a)
    b[0, 0, 1] = b[1, 1, 1] = 1
    assert dice(a, b) == pytest.approx(0.5)
    assert dice(a, a) == 1.0
    assert dice(np.zeros_like(a), np.zeros_like(a)) == 1.0
    assert dice(a, np.zeros_like(a)) == 0.0


def test_center_of_mass_examples():
    m = np.zeros((3, 3, 3), np.uint8)
    m[0, 0, 0] = m[2, 2, 2] = 1
    assert center_of_mass(m) == pytest.approx([1, 1, 1])
    with pytest.raises(EmptyMask):
        center_of_mass(np.zeros((2, 2, 2)))


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))
    with pytest.raises(ShapeMismatch):
        overlaps(np.zeros((2, 2, 2)), np.zeros((3, 2, 2)))


@settings(max_examples=60, deadline=None)
@given(mask_pairs)
def test_dice_matches_oracle_and_is_symmetric(pair):
    a, b = pair
    d = dice(a, b)
    assert d == pytest.approx(oracles.dice(a, b), rel=1e-12)
    assert d == dice(b, a)
    assert 0.0 <= d <= 1.0


@settings(max_examples=60, deadline=None)
@given(mask_pairs)
def test_overlap_iff_positive_dice(pair):
    a, b = pair
    assert overlaps(a, b) == (oracles.intersection_count(a, b) > 0)
    if a.any() or b.any():
        assert overlaps(a, b) == (dice(a, b) > 0)


@settings(max_examples=60, deadline=None)
@given(masks)
def test_center_of_mass_inside_bounding_box(m):
    if not m.any():
        return
    com = center_of_mass(m)
    idx = np.argwhere(m)
    assert np.all(com >= idx.min(0) - 1e-12) and np.all(com <= idx.max(0) + 1e-12)
    assert com == pytest.approx(oracles.center_of_mass(m))


def _vol(shape, spacing=(1, 1, 1)):
    return Volume3D(np.zeros(shape, np.float32), spacing)


def test_multichannel_grid_checks():
    with pytest.raises(ShapeMismatch):
        MultiChannelVolume((_vol((2, 2, 2)), _vol((2, 2, 3))), ("a", "b"))
    with pytest.raises(ShapeMismatch):
        MultiChannelVolume((_vol((2, 2, 2)), _vol((2, 2, 2), (2, 1, 1))), ("a", "b"))
    mc = stack_channels([_vol((2, 3, 4)), _vol((2, 3, 4))], ["ct", "pancreas"])
    assert mc.as_array().shape == (2, 2, 3, 4)
    with pytest.raises(MissingChannel):
        mc["pancreatic_duct"]


def test_labeled_case_consistency():
    x = stack_channels([_vol((2, 2, 2))], ["ct"])
    y = Volume3D(np.zeros((2, 2, 2), np.uint8))
    LabeledCase(x, y, "c", False)
    with pytest.raises(ValueError):
        LabeledCase(x, y, "c", True)
    with pytest.raises(ShapeMismatch):
        LabeledCase(x, Volume3D(np.zeros((2, 2, 3), np.uint8)), "c", False)
