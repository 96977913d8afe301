"""Isotropic resampling and per-modality z-score normalization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .volume import MRIStudy, SegmentationMask, StudyError, Volume, validate_study


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    target_spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    order: int = 1  # image interpolation order; masks always use nearest neighbour

    def __post_init__(self):
        ts = tuple(float(s) for s in self.target_spacing)
        if len(ts) != 3 or not all(np.isfinite(s) and s > 0 for s in ts):
            raise ValueError(f"target_spacing must be 3 positive values, got {self.target_spacing}")
        if self.order not in (0, 1, 3):
            raise ValueError(f"interpolation order must be 0, 1 or 3, got {self.order}")
        object.__setattr__(self, "target_spacing", ts)


def resampled_dims(dims, spacing, target) -> Tuple[int, int, int]:
    out = []
    for n, s, t in zip(dims, spacing, target):
        m = int(round(n * s / t))
        if m < 1:
            raise PreprocessError(
                f"resampling {tuple(dims)} at {tuple(spacing)} mm to {tuple(target)} mm "
                f"gives an empty axis"
            )
        out.append(m)
    return tuple(out)


def _at_target(spacing, target) -> bool:
    return all(abs(s - t) <= 1e-6 * t for s, t in zip(spacing, target))


def _resample_array(data: np.ndarray, spacing, target, order: int) -> np.ndarray:
    out_dims = resampled_dims(data.shape, spacing, target)
    # voxel centres are aligned: output index i sits at physical (i + 0.5) * t
    scale = np.array(target) / np.array(spacing)
    offset = 0.5 * scale - 0.5
    return ndimage.affine_transform(
        np.asarray(data, dtype=np.float64 if order else data.dtype),
        np.diag(scale),
        offset=offset,
        output_shape=out_dims,
        order=order,
        mode="nearest",
    )


def resample_isotropic(v: Volume, cfg: PreprocessConfig = PreprocessConfig()) -> Volume:
    """Resample ``v`` to ``cfg.target_spacing``; volumes already there pass through."""
    if _at_target(v.spacing, cfg.target_spacing):
        return v
    out = _resample_array(v.data, v.spacing, cfg.target_spacing, cfg.order)
    return Volume(out.astype(np.float32), cfg.target_spacing)


def resample_mask(mask: SegmentationMask, cfg: PreprocessConfig = PreprocessConfig()) -> SegmentationMask:
    if _at_target(mask.spacing, cfg.target_spacing):
        return mask
    out = _resample_array(mask.data, mask.spacing, cfg.target_spacing, 0)
    return SegmentationMask((out > 0).astype(np.uint8), cfg.target_spacing)


def zscore_normalize(v: Volume) -> Volume:
    """Subtract the mean and divide by the (population) standard deviation."""
    x = np.asarray(v.data, dtype=np.float64)
    mean = x.mean()
    std = x.std()
    if not np.isfinite(std) or std <= 0.0:
        raise PreprocessError(f"zero variance: constant volume (value {mean:g})")
    return Volume(((x - mean) / std).astype(np.float32), v.spacing)


def preprocess_study(
    study: MRIStudy,
    mask: Optional[SegmentationMask] = None,
    cfg: PreprocessConfig = PreprocessConfig(),
):
    """Resample then normalize every present modality independently.

    Returns ``(study, mask)``; the mask (if any) is resampled with nearest
    neighbour and stays binary.
    """
    problems = validate_study(study)
    if problems:
        raise StudyError(f"{study.patient_id}: invalid study: {'; '.join(problems)}")
    out = {}
    for name, vol in study.modalities.items():
        if vol is None:
            continue
        try:
            out[name] = zscore_normalize(resample_isotropic(vol, cfg))
        except PreprocessError as exc:
            raise PreprocessError(f"{study.patient_id}: {name}: {exc}") from None
    new_study = MRIStudy(study.patient_id, out)
    new_mask = None
    if mask is not None:
        if mask.dims != study.dims:
            raise StudyError(
                f"{study.patient_id}: mask dims {mask.dims} do not match study {study.dims}"
            )
        new_mask = resample_mask(mask, cfg)
    return new_study, new_mask
