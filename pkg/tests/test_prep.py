"""Preprocessing checks against independent oracles.

Resampling is compared with scipy's ``map_coordinates`` on an explicit
corner-aligned grid; lung extraction against a hand-constructed component
layout; block pooling against naive loops.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from ctexperts.prep import (CANONICAL_2D, CANONICAL_3D, AugmentBounds,
                            AugmentCallLog, AugmentParams, CanonicalVolume3D,
                            PrepError, ScanVolume, SliceStack2D, augment_scan,
                            canonicalize_2d, canonicalize_3d, extract_lung,
                            minmax_normalize, otsu_threshold, pool_volume,
                            resize_linear, sample_augment_params, trim_slices)


def make_scan(shape, seed=0, scan_id="s"):
    vox = np.random.default_rng(seed).random(shape).astype(np.float32)
    return ScanVolume(vox, scan_id=scan_id)


# ---------------------------------------------------------------------------
# slice trimming


def test_trim_noop_at_or_under_threshold():
    for n in (1, 50, 149, 150):
        scan = make_scan((n, 4, 4))
        out = trim_slices(scan)
        assert out.voxels.shape[0] == n
        assert np.array_equal(out.voxels, scan.voxels)


def test_trim_over_threshold_cuts_floor_per_end():
    scan = make_scan((151, 4, 4))
    out = trim_slices(scan)
    cut = int(np.floor(0.15 * 151))  # 22
    assert cut == 22
    assert out.voxels.shape[0] == 151 - 2 * cut
    assert np.array_equal(out.voxels, scan.voxels[cut:151 - cut])
    assert out.meta["trimmed_per_end"] == cut


def test_trim_example_200_slices():
    scan = make_scan((200, 4, 4))
    out = trim_slices(scan)
    assert out.meta["trimmed_per_end"] == 30
    assert out.voxels.shape[0] == 140


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 600))
def test_trim_properties(n):
    scan = ScanVolume(np.arange(n, dtype=np.float32).reshape(n, 1, 1))
    out = trim_slices(scan)
    kept = out.voxels[:, 0, 0]
    # kept slices are a contiguous, order-preserving range of the input
    assert np.array_equal(kept, np.arange(kept[0], kept[0] + kept.size))
    if n <= 150:
        assert kept.size == n
    else:
        cut = int(np.floor(0.15 * n))
        assert kept.size == n - 2 * cut
        assert kept[0] == cut


def test_trim_bad_fraction_rejected():
    with pytest.raises(PrepError, match="trim_fraction"):
        trim_slices(make_scan((10, 2, 2)), trim_fraction=0.5)


# ---------------------------------------------------------------------------
# lung extraction


def test_extract_lung_keeps_two_largest_and_crops_to_union_bbox():
    vox = np.zeros((10, 20, 30), dtype=np.float32)
    vox[2:8, 2:10, 2:10] = 1.0      # large block A
    vox[2:8, 2:10, 18:26] = 1.0     # large block B
    vox[4:5, 5:6, 14:15] = 1.0      # tiny distractor between the blocks
    scan = ScanVolume(vox, scan_id="x")
    out = extract_lung(scan, threshold=0.5)
    assert out.meta["lung_bbox"] == ((2, 8), (2, 10), (2, 26))
    assert out.voxels.shape == (6, 8, 24)
    # distractor voxel lies inside the crop but outside the kept components
    assert out.voxels[2, 3, 12] == 0.0
    assert out.voxels[0, 0, 0] == 1.0


def test_extract_lung_zeroes_everything_outside_components():
    vox = np.full((6, 10, 10), 0.3, dtype=np.float32)  # haze below threshold
    vox[1:5, 1:4, 1:4] = 0.9
    vox[1:5, 6:9, 6:9] = 0.9
    out = extract_lung(ScanVolume(vox), threshold=0.5)
    inside = (out.voxels > 0).sum()
    assert inside == 4 * 3 * 3 * 2
    assert out.voxels.max() == np.float32(0.9)
    assert out.voxels.min() == 0.0


def test_extract_lung_all_background_warns_and_passes_through():
    scan = ScanVolume(np.zeros((4, 4, 4), dtype=np.float32))
    out = extract_lung(scan, threshold=0.5)
    assert np.array_equal(out.voxels, scan.voxels)
    assert "lung_warning" in out.meta


def test_extract_lung_otsu_default_separates_bimodal():
    rng = np.random.default_rng(5)
    vox = (0.2 + 0.01 * rng.standard_normal((8, 16, 16))).astype(np.float32)
    vox[2:6, 4:12, 4:12] = (0.8 + 0.01 * rng.standard_normal((4, 8, 8))).astype(np.float32)
    out = extract_lung(ScanVolume(vox), keep_components=1)
    # the auto threshold must land in the intensity gap: the crop is then
    # exactly the bright block and no background haze survives inside it
    assert 0.2 < out.meta["lung_threshold"] < 0.8
    assert out.voxels.shape == (4, 8, 8)
    assert out.voxels.min() > 0.7


def test_otsu_threshold_separates_bimodal():
    rng = np.random.default_rng(6)
    values = np.concatenate([
        rng.normal(0.2, 0.02, size=4000), rng.normal(0.8, 0.02, size=4000)])
    truth = np.arange(values.size) >= 4000
    thr = otsu_threshold(values)
    assert 0.22 < thr < 0.78
    assert ((values > thr) == truth).mean() > 0.999


def test_otsu_threshold_two_value_input_splits_exactly():
    values = np.array([0.0] * 5 + [1.0] * 3)
    thr = otsu_threshold(values)
    assert 0.0 <= thr < 1.0
    assert np.array_equal(values > thr, values == 1.0)


def test_otsu_constant_input():
    assert otsu_threshold(np.full(100, 0.4)) == pytest.approx(0.4)


# ---------------------------------------------------------------------------
# resampling and normalization


def map_coordinates_oracle(volume, target_shape):
    """Corner-aligned linear resample via scipy, as an independent check."""
    grids = []
    for n, t in zip(volume.shape, target_shape):
        if t == 1:
            grids.append(np.array([(n - 1) / 2.0]))
        else:
            grids.append(np.arange(t) * ((n - 1) / (t - 1)))
    mesh = np.meshgrid(*grids, indexing="ij")
    coords = np.stack([m.ravel() for m in mesh])
    out = ndimage.map_coordinates(volume.astype(np.float64), coords, order=1,
                                  mode="nearest")
    return out.reshape(target_shape)


@pytest.mark.parametrize("in_shape,out_shape", [
    ((7, 9, 11), (13, 5, 8)),
    ((3, 3, 3), (9, 9, 9)),
    ((24, 40, 40), (12, 64, 64)),
])
def test_resize_matches_map_coordinates(in_shape, out_shape):
    vol = np.random.default_rng(1).random(in_shape)
    ours = resize_linear(vol, out_shape)
    oracle = map_coordinates_oracle(vol, out_shape)
    assert np.max(np.abs(ours - oracle)) < 1e-9


def test_resize_identity_is_exact():
    vol = np.random.default_rng(2).random((5, 6, 7)).astype(np.float32)
    out = resize_linear(vol, (5, 6, 7))
    assert np.array_equal(out, vol)


def test_resize_preserves_monotonicity():
    vol = np.tile(np.linspace(0, 1, 17)[:, None, None], (1, 3, 3))
    out = resize_linear(vol, (40, 3, 3))
    profile = out[:, 1, 1]
    assert np.all(np.diff(profile) >= -1e-12)


def test_resize_to_single_element_takes_center():
    vol = np.linspace(0, 1, 9).reshape(9, 1, 1)
    out = resize_linear(vol, (1, 1, 1))
    assert out[0, 0, 0] == pytest.approx(0.5)


def test_resize_rank_mismatch_rejected():
    with pytest.raises(PrepError, match="rank"):
        resize_linear(np.zeros((4, 4)), (4, 4, 4))


def test_minmax_cases():
    out = minmax_normalize(np.array([[[2.0, 4.0], [6.0, 10.0]]]))
    assert out.min() == 0.0 and out.max() == 1.0
    assert out[0, 0, 1] == pytest.approx(0.25)
    assert np.array_equal(minmax_normalize(np.full((2, 2, 2), 3.0)),
                          np.zeros((2, 2, 2), dtype=np.float32))
    with pytest.raises(PrepError, match="non-finite"):
        minmax_normalize(np.array([[[np.inf]]]))


def test_canonicalize_shapes_and_range():
    scan = make_scan((37, 83, 61), seed=9)
    vol3 = canonicalize_3d(scan)
    assert vol3.voxels.shape == CANONICAL_3D == (128, 256, 256)
    assert vol3.voxels.min() >= 0.0 and vol3.voxels.max() <= 1.0
    stack = canonicalize_2d(scan)
    assert stack.slices.shape == CANONICAL_2D == (24, 448, 448)


def test_canonical_containers_validate():
    with pytest.raises(PrepError, match="shape"):
        CanonicalVolume3D(np.zeros((2, 2, 2), dtype=np.float32))
    with pytest.raises(PrepError, match="shape"):
        SliceStack2D(np.zeros((2, 2, 2), dtype=np.float32))
    with pytest.raises(PrepError, match="0, 1"):
        CanonicalVolume3D(np.full(CANONICAL_3D, 2.0, dtype=np.float32))


def test_pool_volume_matches_naive_loops():
    vol = np.random.default_rng(3).random((4, 6, 8)).astype(np.float32)
    out = pool_volume(vol, (2, 3, 4))
    naive = np.empty((2, 2, 2), dtype=np.float64)
    for i in range(2):
        for j in range(2):
            for k in range(2):
                naive[i, j, k] = vol[2 * i:2 * i + 2, 3 * j:3 * j + 3,
                                     4 * k:4 * k + 4].mean()
    assert np.allclose(out, naive, atol=1e-6)


def test_pool_volume_bad_factors_rejected():
    with pytest.raises(PrepError, match="divide"):
        pool_volume(np.zeros((4, 4, 4), dtype=np.float32), (3, 2, 2))


# ---------------------------------------------------------------------------
# scan-consistent augmentation


def small_canonical(seed=0):
    rng = np.random.default_rng(seed)
    return CanonicalVolume3D(rng.random(CANONICAL_3D).astype(np.float32))


def small_bounds(shape):
    return AugmentBounds(crop_fraction=(0.8, 1.0), rotation_range=(-10, 10),
                         resize_target=shape)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_sampled_params_respect_bounds(seed):
    shape = (12, 20, 20)
    rng = np.random.default_rng(seed)
    params = sample_augment_params(rng, small_bounds(shape), shape)
    os_, or_, oc, es, er, ec = params.crop_box
    for off, ext, dim, in ((os_, es, 12), (or_, er, 20), (oc, ec, 20)):
        assert 0 <= off and off + ext <= dim
        assert ext >= int(0.8 * dim) - 1
    assert -10.0 <= params.rotation_degrees <= 10.0
    assert params.resize_target == shape


def test_augment_all_slices_share_one_parameter_set():
    vol = small_canonical()
    params = AugmentParams(crop_box=(10, 20, 20, 100, 200, 200),
                           rotation_degrees=5.0, resize_target=CANONICAL_3D)
    log = AugmentCallLog()
    augment_scan(vol, params, log=log, scan_id="scan_a")
    per_scan = log.params_per_scan()
    assert set(per_scan) == {"scan_a"}
    assert len(per_scan["scan_a"]) == 1  # one params key across every slice
    assert len(log.records) == CANONICAL_3D[0]


def test_augment_rotation_matches_per_slice_oracle():
    vol = small_canonical(4)
    params = AugmentParams(crop_box=(0, 0, 0, *CANONICAL_3D),
                           rotation_degrees=7.5, resize_target=CANONICAL_3D)
    out = augment_scan(vol, params)
    # oracle: rotate every slice independently in 2D with identical settings
    oracle = np.stack([
        ndimage.rotate(vol.voxels[i], 7.5, reshape=False, order=1, mode="nearest")
        for i in range(CANONICAL_3D[0])
    ])
    oracle = np.clip(oracle, 0.0, 1.0)
    assert np.max(np.abs(out.voxels - oracle)) < 1e-6


def test_augment_identity_params_identity_output():
    vol = small_canonical(1)
    params = AugmentParams(crop_box=(0, 0, 0, *CANONICAL_3D),
                           rotation_degrees=0.0, resize_target=CANONICAL_3D)
    out = augment_scan(vol, params)
    assert np.array_equal(out.voxels, vol.voxels)


def test_augment_crop_out_of_bounds_rejected():
    vol = small_canonical(2)
    params = AugmentParams(crop_box=(0, 0, 200, 128, 256, 100),
                           rotation_degrees=0.0, resize_target=CANONICAL_3D)
    with pytest.raises(PrepError, match="crop box"):
        augment_scan(vol, params)


def test_augment_deterministic_under_same_stream():
    vol = small_canonical(3)
    bounds = AugmentBounds()
    p1 = sample_augment_params(np.random.default_rng(42), bounds)
    p2 = sample_augment_params(np.random.default_rng(42), bounds)
    assert p1 == p2
    a = augment_scan(vol, p1)
    b = augment_scan(vol, p2)
    assert np.array_equal(a.voxels, b.voxels)


def test_augment_output_stays_canonical():
    vol = small_canonical(4)
    params = sample_augment_params(np.random.default_rng(0), AugmentBounds())
    out = augment_scan(vol, params)
    assert out.voxels.shape == CANONICAL_3D
    assert out.voxels.min() >= 0.0 and out.voxels.max() <= 1.0


def test_bounds_validation():
    with pytest.raises(PrepError, match="crop_fraction"):
        AugmentBounds(crop_fraction=(1.2, 1.3))
    with pytest.raises(PrepError, match="rotation"):
        AugmentBounds(rotation_range=(10.0, -10.0))
