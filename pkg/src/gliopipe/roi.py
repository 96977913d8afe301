"""Bounding-box ROI extraction around a whole-tumor mask."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .volume import MRIStudy, SegmentationMask, assemble_channels

DEFAULT_MARGIN = 4
MIN_ROI_DIM = 16

Index3 = Tuple[int, int, int]


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with inclusive ``lo`` and ``hi`` voxel corners."""

    lo: Index3
    hi: Index3

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3 or any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"invalid box lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def shape(self) -> Index3:
        return tuple(b - a + 1 for a, b in zip(self.lo, self.hi))

    @property
    def slices(self):
        return tuple(slice(a, b + 1) for a, b in zip(self.lo, self.hi))

    def within(self, dims) -> bool:
        return all(0 <= a and b < n for a, b, n in zip(self.lo, self.hi, dims))


@dataclass(frozen=True, eq=False)
class TumorROI:
    channels: np.ndarray  # (4, dx, dy, dz)
    box: BoundingBox
    patient_id: str

    @property
    def dims(self) -> Index3:
        return tuple(int(n) for n in self.channels.shape[1:])


def mask_bbox(mask: SegmentationMask, margin: int = DEFAULT_MARGIN) -> BoundingBox:
    """Tight box over all nonzero voxels, grown by ``margin`` and clipped to the volume.

    Disconnected components are all covered; no component filtering.
    """
    data = mask.data if isinstance(mask, SegmentationMask) else np.asarray(mask)
    if margin < 0:
        raise ValueError("margin must be >= 0")
    idx = np.argwhere(data)
    if len(idx) == 0:
        raise EmptyMaskError("no tumor voxels")
    lo = np.maximum(idx.min(axis=0) - margin, 0)
    hi = np.minimum(idx.max(axis=0) + margin, np.array(data.shape) - 1)
    return BoundingBox(tuple(lo), tuple(hi))


def expand_box(box: BoundingBox, dims, min_dim: int = MIN_ROI_DIM) -> BoundingBox:
    """Grow each axis shorter than ``min_dim`` symmetrically, shifting at the bounds."""
    lo, hi = list(box.lo), list(box.hi)
    for a, n in enumerate(dims):
        if n < min_dim:
            raise ValueError(f"volume axis {a} has {n} voxels, fewer than min_roi_dim {min_dim}")
        size = hi[a] - lo[a] + 1
        if size >= min_dim:
            continue
        extra = min_dim - size
        lo[a] -= extra // 2
        hi[a] += extra - extra // 2
        if lo[a] < 0:
            hi[a] -= lo[a]
            lo[a] = 0
        if hi[a] > n - 1:
            lo[a] -= hi[a] - (n - 1)
            hi[a] = n - 1
    return BoundingBox(tuple(lo), tuple(hi))


def crop_array(channels: np.ndarray, box: BoundingBox, min_roi_dim: int = MIN_ROI_DIM):
    dims = channels.shape[1:]
    if not box.within(dims):
        raise ValueError(f"box {box.lo}-{box.hi} outside volume {tuple(dims)}")
    box = expand_box(box, dims, min_roi_dim)
    return channels[(slice(None),) + box.slices].copy(), box


def crop_roi(study: MRIStudy, box: BoundingBox, min_roi_dim: int = MIN_ROI_DIM) -> TumorROI:
    """Crop the assembled channels to ``box``; no resampling or resizing."""
    chans, box = crop_array(assemble_channels(study), box, min_roi_dim)
    return TumorROI(chans, box, study.patient_id)


def extract_roi(study: MRIStudy, mask: SegmentationMask, margin: int = DEFAULT_MARGIN,
                min_roi_dim: int = MIN_ROI_DIM) -> TumorROI:
    return crop_roi(study, mask_bbox(mask, margin), min_roi_dim)
