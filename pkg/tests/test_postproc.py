"""Attribution post-processing: filter correctness against explicit kernel
tables and scipy.ndimage, purity, and the mask-smoothing property."""

import numpy as np
import pytest
import scipy.ndimage as ndi

from roarlab.attribution import AttributionMap
from roarlab.masking import top_t_mask, total_variation
from roarlab.postproc import (
    PostprocSpec,
    apply,
    apply_batch,
    gaussian_filter_batch,
    gaussian_kernel_1d,
    max_filter_batch,
    reduce_channels,
    upsample_nearest,
    upsample_nearest_batch,
)


def test_spec_validation():
    with pytest.raises(ValueError, match="unknown"):
        PostprocSpec(kind="median")
    with pytest.raises(ValueError, match="sigma"):
        PostprocSpec(kind="gaussian", sigma=0.0)
    with pytest.raises(ValueError, match="kernel"):
        PostprocSpec(kind="maxpool", kernel=4)


def test_plain_is_identity():
    a = np.random.default_rng(0).normal(size=(7, 7))
    np.testing.assert_array_equal(apply(PostprocSpec(kind="plain"), a), a)


def test_constant_map_unchanged_by_both_filters():
    a = np.full((9, 9), 3.25)
    for kind in ("gaussian", "maxpool"):
        out = apply(PostprocSpec(kind=kind), a)
        np.testing.assert_allclose(out, a, rtol=0, atol=1e-12)


def test_gaussian_impulse_matches_kernel_table():
    # 17x17 grid, unit impulse at center, sigma=1: response = outer product
    # of the normalized 1-d kernel (radius 4), mass preserved
    a = np.zeros((17, 17))
    a[8, 8] = 1.0
    out = apply(PostprocSpec(kind="gaussian", sigma=1.0), a)
    k = gaussian_kernel_1d(1.0, 4.0)
    expected = np.zeros_like(a)
    expected[4:13, 4:13] = np.outer(k, k)
    np.testing.assert_allclose(out, expected, atol=1e-15)
    assert out[8, 8] == pytest.approx(k[4] * k[4])
    assert abs(out.sum() - 1.0) < 1e-6


def test_gaussian_matches_scipy_reflect():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(16, 16))
    ours = apply(PostprocSpec(kind="gaussian", sigma=1.0), a)
    ref = ndi.gaussian_filter(a, sigma=1.0, mode="reflect", truncate=4.0)
    np.testing.assert_allclose(ours, ref, rtol=1e-10, atol=1e-12)


def test_gaussian_preserves_value_range():
    rng = np.random.default_rng(2)
    for _ in range(10):
        a = rng.normal(size=(12, 12))
        out = apply(PostprocSpec(kind="gaussian", sigma=1.5), a)
        assert out.min() >= a.min() - 1e-12
        assert out.max() <= a.max() + 1e-12


def test_maxpool_hand_case():
    a = np.array([[0.0, 0, 0], [0, 5, 0], [0, 0, 0]])
    out = apply(PostprocSpec(kind="maxpool", kernel=3), a)
    np.testing.assert_array_equal(out, np.full((3, 3), 5.0))


def test_maxpool_matches_scipy_reflect():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(16, 16))
    for kernel in (3, 5):
        ours = apply(PostprocSpec(kind="maxpool", kernel=kernel), a)
        ref = ndi.maximum_filter(a, size=kernel, mode="reflect")
        np.testing.assert_array_equal(ours, ref)


def test_maxpool_dominates_input():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(10, 10))
    out = apply(PostprocSpec(kind="maxpool", kernel=3), a)
    assert (out >= a).all()


def test_apply_rejects_3d():
    with pytest.raises(ValueError, match="2-d"):
        apply(PostprocSpec(kind="gaussian"), np.zeros((2, 4, 4)))


def test_apply_depends_only_on_values():
    values = np.random.default_rng(5).normal(size=(8, 8))
    a1 = AttributionMap(values.copy(), method="grad", sample_id=1, seed=1)
    a2 = AttributionMap(values.copy(), method="vargrad", sample_id=99, seed=7)
    spec = PostprocSpec(kind="gaussian")
    np.testing.assert_array_equal(apply(spec, a1).values, apply(spec, a2).values)


def test_reduce_channels():
    rng = np.random.default_rng(6)
    one = rng.normal(size=(1, 5, 5))
    np.testing.assert_array_equal(reduce_channels(one), one[0])
    two = np.stack([one[0], one[0]])
    np.testing.assert_allclose(reduce_channels(two), 2 * one[0])
    three = rng.normal(size=(3, 5, 5))
    expected = np.zeros((5, 5))
    for c in range(3):
        expected += three[c]
    np.testing.assert_allclose(reduce_channels(three), expected, rtol=1e-15)


def test_upsample_constant_and_blocks():
    one = np.array([[7.0]])
    np.testing.assert_array_equal(upsample_nearest(one, 4, 4), np.full((4, 4), 7.0))
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    up = upsample_nearest(a, 4, 4)
    np.testing.assert_array_equal(up, np.repeat(np.repeat(a, 2, axis=0), 2, axis=1))


def test_upsample_matches_index_oracle():
    a = np.random.default_rng(7).normal(size=(3, 3))
    up = upsample_nearest(a, 16, 16)
    for i in range(16):
        for j in range(16):
            assert up[i, j] == a[(i * 3) // 16, (j * 3) // 16]


def test_upsample_rejects_downscale():
    with pytest.raises(ValueError, match="smaller"):
        upsample_nearest(np.zeros((4, 4)), 2, 8)


def test_batch_matches_single():
    rng = np.random.default_rng(8)
    maps = rng.normal(size=(4, 8, 8))
    for spec in (PostprocSpec(kind="gaussian"), PostprocSpec(kind="maxpool")):
        batch = apply_batch(spec, maps)
        for i in range(4):
            np.testing.assert_array_equal(batch[i], apply(spec, maps[i]))
    up = upsample_nearest_batch(maps, 16, 16)
    for i in range(4):
        np.testing.assert_array_equal(up[i], upsample_nearest(maps[i], 16, 16))


def test_filters_reduce_mask_tv_on_sharp_maps():
    # scattered peaky maps: blurring them must give blockier top-t masks
    # for the overwhelming majority of cases
    rng = np.random.default_rng(9)
    better = {"gaussian": 0, "maxpool": 0}
    trials = 60
    for _ in range(trials):
        a = rng.normal(size=(16, 16)) ** 2
        tv_plain = top_t_mask(a, 0.3).tv
        for kind in better:
            filtered = apply(PostprocSpec(kind=kind), a)
            if top_t_mask(filtered, 0.3).tv <= tv_plain:
                better[kind] += 1
    assert better["gaussian"] >= 0.9 * trials
    assert better["maxpool"] >= 0.9 * trials
