import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gliopipe.roi import (
    BoundingBox,
    EmptyMaskError,
    crop_roi,
    expand_box,
    extract_roi,
    mask_bbox,
)
from gliopipe.volume import MRIStudy, SegmentationMask, Volume, assemble_channels


def block_mask(dims, lo, hi):
    m = np.zeros(dims, np.uint8)
    m[tuple(slice(a, b + 1) for a, b in zip(lo, hi))] = 1
    return SegmentationMask(m)


def ramp_study(dims):
    x = np.arange(np.prod(dims), dtype=np.float32).reshape(dims)
    return MRIStudy("r", {"T1ce": Volume(x), "FLAIR": Volume(-x)})


def test_bbox_with_margin_clipped():
    box = mask_bbox(block_mask((32, 32, 32), (2, 3, 4), (10, 8, 6)), margin=2)
    assert box.lo == (0, 1, 2) and box.hi == (12, 10, 8)


def test_bbox_clips_upper_bound():
    box = mask_bbox(block_mask((16, 16, 16), (12, 12, 12), (15, 15, 14)), margin=4)
    assert box.hi == (15, 15, 15) and box.lo == (8, 8, 8)


def test_bbox_covers_disconnected_components():
    m = np.zeros((20, 20, 20), np.uint8)
    m[1, 1, 1] = 1
    m[18, 10, 15] = 1
    box = mask_bbox(SegmentationMask(m), margin=0)
    assert box.lo == (1, 1, 1) and box.hi == (18, 10, 15)


def test_empty_mask():
    with pytest.raises(EmptyMaskError, match="no tumor voxels"):
        mask_bbox(SegmentationMask(np.zeros((4, 4, 4), np.uint8)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bbox_contains_and_is_minimal(seed):
    rng = np.random.default_rng(seed)
    m = (rng.random((9, 10, 11)) > 0.97).astype(np.uint8)
    if not m.any():
        m[4, 5, 6] = 1
    box = mask_bbox(SegmentationMask(m), margin=0)
    inside = np.zeros_like(m)
    inside[box.slices] = 1
    assert not (m & (1 - inside)).any()
    # every face of the tight box touches a tumor voxel
    for axis in range(3):
        sub = m[box.slices]
        assert np.take(sub, 0, axis=axis).any() and np.take(sub, -1, axis=axis).any()


def test_crop_values_roundtrip():
    dims = (24, 24, 24)
    s = ramp_study(dims)
    roi = extract_roi(s, block_mask(dims, (5, 6, 7), (15, 14, 13)), margin=2, min_roi_dim=4)
    assert roi.box.lo == (3, 4, 5) and roi.box.hi == (17, 16, 15)
    full = assemble_channels(s)
    np.testing.assert_array_equal(roi.channels, full[(slice(None),) + roi.box.slices])
    assert roi.channels.shape == (4, 15, 13, 11)
    assert not roi.channels[0].any() and not roi.channels[2].any()


def test_small_tumor_expanded_to_minimum():
    dims = (32, 32, 32)
    roi = extract_roi(ramp_study(dims), block_mask(dims, (14, 14, 14), (16, 16, 16)), margin=0)
    assert roi.dims == (16, 16, 16)
    assert roi.box.lo == (8, 8, 8) and roi.box.hi == (23, 23, 23)


def test_expansion_shifts_at_border():
    box = expand_box(BoundingBox((0, 30, 10), (2, 31, 12)), (32, 32, 32), 16)
    assert box.shape == (16, 16, 16)
    assert box.lo == (0, 16, 4) and box.hi == (15, 31, 19)


def test_volume_smaller_than_minimum():
    with pytest.raises(ValueError):
        expand_box(BoundingBox((0, 0, 0), (1, 1, 1)), (8, 32, 32), 16)


def test_box_outside_volume():
    with pytest.raises(ValueError):
        crop_roi(ramp_study((16, 16, 16)), BoundingBox((0, 0, 0), (16, 3, 3)))


def test_invalid_box():
    with pytest.raises(ValueError):
        BoundingBox((3, 0, 0), (2, 4, 4))
