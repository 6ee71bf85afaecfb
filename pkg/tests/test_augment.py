from dataclasses import replace

import numpy as np
import pytest

from pancdetect.augment import AugmentPolicy, augment_case
from pancdetect.errors import InvalidConfig
from pancdetect.volume import CT, MASK_CHANNELS, PANCREAS, dice


def test_identity_policy_is_identity(small_prep_case):
    out = augment_case(small_prep_case, AugmentPolicy.identity(), draw_seed=3)
    for name in small_prep_case.x.channel_names:
        np.testing.assert_array_equal(out.x[name].data, small_prep_case.x[name].data)
    np.testing.assert_array_equal(out.y.data, small_prep_case.y.data)


def test_flip_is_involution(small_prep_case):
    policy = replace(AugmentPolicy.identity(), p_flip=(1.0, 0.0, 1.0))
    once = augment_case(small_prep_case, policy, 0)
    assert not np.array_equal(once.x[CT].data, small_prep_case.x[CT].data)
    np.testing.assert_array_equal(once.x[CT].data, small_prep_case.x[CT].data[::-1, :, ::-1])
    twice = augment_case(once, policy, 1)
    np.testing.assert_array_equal(twice.x[CT].data, small_prep_case.x[CT].data)
    np.testing.assert_array_equal(twice.y.data, small_prep_case.y.data)


def test_gaussian_noise_variance(small_prep_case):
    policy = replace(AugmentPolicy.identity(), gauss_sigma_range=(0.3, 0.3))
    out = augment_case(small_prep_case, policy, 0)
    diff = out.x[CT].data.astype(float) - small_prep_case.x[CT].data
    assert diff.var() == pytest.approx(0.09, rel=0.2)
    # Noise touches the CT only.
    np.testing.assert_array_equal(out.x[PANCREAS].data, small_prep_case.x[PANCREAS].data)


def test_full_policy_keeps_masks_binary_and_aligned(small_prep_case):
    policy = AugmentPolicy(rotation_max_degrees=(10, 10, 10), seed=2)
    for seed in range(3):
        out = augment_case(small_prep_case, policy, seed)
        assert out.shape == small_prep_case.shape
        for name in MASK_CHANNELS:
            assert out.x[name].is_binary()
        assert out.y.is_binary()
        assert np.isfinite(out.x[CT].data).all()
        # The label moves with the anatomy.
        lesion = out.y.data.astype(bool)
        if lesion.any():
            assert (lesion & out.x[PANCREAS].data.astype(bool)).sum() / lesion.sum() > 0.5


def test_small_rotation_preserves_masks(small_prep_case):
    policy = replace(AugmentPolicy.identity(), rotation_max_degrees=(3, 3, 3))
    out = augment_case(small_prep_case, policy, 0)
    assert dice(out.x[PANCREAS].data, small_prep_case.x[PANCREAS].data) > 0.8


def test_deterministic_in_seed(small_prep_case):
    policy = AugmentPolicy(seed=4)
    a, b = augment_case(small_prep_case, policy, 7), augment_case(small_prep_case, policy, 7)
    c = augment_case(small_prep_case, policy, 8)
    assert a.x[CT].data.tobytes() == b.x[CT].data.tobytes()
    assert a.x[CT].data.tobytes() != c.x[CT].data.tobytes()


def test_policy_validation():
    with pytest.raises(InvalidConfig):
        AugmentPolicy(p_flip=(2.0, 0.0, 0.0))
    with pytest.raises(InvalidConfig):
        AugmentPolicy(contrast_range=(0.2, 0.1))
    with pytest.raises(InvalidConfig):
        AugmentPolicy.from_dict({"bogus": 1})
    assert AugmentPolicy.from_dict(AugmentPolicy(seed=3).to_dict()) == AugmentPolicy(seed=3)
