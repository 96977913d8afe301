"""Core data model: volumes, multi-modality studies, masks and labels.

Arrays are indexed ``(x, y, z)`` with ``z`` the inferior-superior axis.
Channel order is fixed to ``MODALITIES``; a modality that was not acquired
is an all-zero channel once the study is assembled into a network tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

MODALITIES: Tuple[str, ...] = ("T1", "T1ce", "T2", "FLAIR")
TASKS: Tuple[str, ...] = ("grade", "idh", "codel")


class StudyError(ValueError):
    """Raised when a study, volume or mask violates its structural invariants."""


def _check_spacing(spacing) -> Tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise StudyError(f"spacing must have 3 components, got {len(sp)}")
    if not all(np.isfinite(s) and s > 0 for s in sp):
        raise StudyError(f"spacing must be positive and finite, got {sp}")
    return sp


@dataclass(frozen=True, eq=False)
class Volume:
    """A rank-3 scalar image with voxel spacing in mm.

    Finiteness of the intensities is not checked on construction (it costs a
    full pass over the data); ``validate_study`` reports non-finite voxels.
    """

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise StudyError(f"volume data must be rank 3, got shape {data.shape}")
        if min(data.shape) < 1:
            raise StudyError(f"volume dims must be positive, got {data.shape}")
        data = data.view()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())


@dataclass(frozen=True, eq=False)
class SegmentationMask:
    """Binary whole-tumor mask."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise StudyError(f"mask data must be rank 3, got shape {data.shape}")
        if data.dtype != np.uint8:
            if not np.isin(data, (0, 1)).all():
                raise StudyError("mask values must be 0 or 1")
            data = data.astype(np.uint8)
        elif data.size and data.max() > 1:
            raise StudyError("mask values must be 0 or 1")
        data = data.view()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def voxel_count(self) -> int:
        return int(self.data.sum(dtype=np.int64))


@dataclass(frozen=True)
class LabelTriple:
    """Ground-truth labels; ``None`` marks a label that is not available.

    grade: 1 = GBM, 0 = LGG.  idh: 1 = mutant.  codel: 1 = 1p19q co-deleted.
    """

    grade: Optional[int] = None
    idh: Optional[int] = None
    codel: Optional[int] = None

    def __post_init__(self):
        for name in TASKS:
            v = getattr(self, name)
            if v is not None and v not in (0, 1):
                raise ValueError(f"label {name} must be 0, 1 or None, got {v!r}")
            if v is not None:
                object.__setattr__(self, name, int(v))

    def as_tuple(self) -> Tuple[Optional[int], Optional[int], Optional[int]]:
        return (self.grade, self.idh, self.codel)

    @property
    def complete(self) -> bool:
        return all(v is not None for v in self.as_tuple())

    @property
    def any(self) -> bool:
        return any(v is not None for v in self.as_tuple())

    def as_array(self) -> np.ndarray:
        """Float array of length 3 with NaN for missing labels."""
        return np.array([np.nan if v is None else float(v) for v in self.as_tuple()])


@dataclass(frozen=True, eq=False)
class MRIStudy:
    """One patient's co-registered modalities.

    Construction enforces the inclusion criterion (T1ce plus T2 and/or FLAIR);
    shape, spacing and finiteness problems are reported by ``validate_study``.
    """

    patient_id: str
    modalities: Mapping[str, Optional[Volume]] = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.modalities) - set(MODALITIES)
        if unknown:
            raise StudyError(f"unknown modalities: {sorted(unknown)}")
        mods = {m: self.modalities.get(m) for m in MODALITIES}
        object.__setattr__(self, "modalities", mods)
        if mods["T1ce"] is None:
            raise StudyError(f"{self.patient_id}: T1ce is required")
        if mods["T2"] is None and mods["FLAIR"] is None:
            raise StudyError(f"{self.patient_id}: at least one of T2/FLAIR is required")

    @property
    def present(self) -> frozenset:
        return frozenset(m for m, v in self.modalities.items() if v is not None)

    @property
    def reference(self) -> Volume:
        return self.modalities["T1ce"]

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.reference.dims

    @property
    def spacing(self) -> Tuple[float, float, float]:
        return self.reference.spacing

    def replace(self, **volumes: Optional[Volume]) -> "MRIStudy":
        mods: Dict[str, Optional[Volume]] = dict(self.modalities)
        mods.update(volumes)
        return MRIStudy(self.patient_id, mods)


def validate_study(study: MRIStudy) -> List[str]:
    """Return every invariant violation of ``study`` (empty list when valid).

    Dimensions and spacing are compared against T1ce, which is always present.
    """
    violations = []
    ref = study.reference
    for name in MODALITIES:
        vol = study.modalities[name]
        if vol is None:
            continue
        if vol.dims != ref.dims:
            violations.append(f"dims mismatch: {name}")
        if not np.allclose(vol.spacing, ref.spacing, rtol=0, atol=1e-6):
            violations.append(f"spacing mismatch: {name}")
        if not vol.is_finite():
            violations.append(f"non-finite values: {name}")
    return violations


def assemble_channels(study: MRIStudy) -> np.ndarray:
    """Stack modalities into a ``(4, nx, ny, nz)`` float32 array.

    Absent modalities become all-zero channels.
    """
    dims = study.dims
    out = np.zeros((len(MODALITIES),) + dims, dtype=np.float32)
    for c, name in enumerate(MODALITIES):
        vol = study.modalities[name]
        if vol is None:
            continue
        if vol.dims != dims:
            raise StudyError(
                f"{study.patient_id}: {name} has dims {vol.dims}, expected {dims}"
            )
        out[c] = vol.data
    return out


def present_mask(present) -> np.ndarray:
    """Boolean vector over ``MODALITIES`` marking present channels."""
    return np.array([m in present for m in MODALITIES], dtype=bool)
