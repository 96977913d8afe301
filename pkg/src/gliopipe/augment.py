"""Training-time augmentation of ``(C, X, Y, Z)`` images and ``(X, Y, Z)`` masks.

Every random transform takes an explicit ``numpy.random.Generator``; the
deterministic core of each transform is exposed separately so callers and
tests can pin the sampled parameters.

The pipeline order is fixed: modality dropout, flip, axial rotation, elastic
deformation, intensity scaling.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volume import MODALITIES

T1CE = MODALITIES.index("T1ce")
T2_LIKE = (MODALITIES.index("T2"), MODALITIES.index("FLAIR"))
_MAX_REDRAWS = 1000


@dataclass(frozen=True)
class AugmentConfig:
    p_flip: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    p_rotate: float = 0.5
    rotation_range: Tuple[float, float] = (-15.0, 15.0)  # degrees, in-plane
    rot90: bool = False  # also draw an exact multiple of 90 degrees
    intensity_scale_range: Tuple[float, float] = (0.9, 1.1)
    elastic_grid_mm: float = 32.0
    elastic_max_disp_mm: float = 4.0
    p_elastic: float = 0.3
    p_channel_drop: float = 0.25
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "p_flip", tuple(float(p) for p in self.p_flip))
        object.__setattr__(self, "rotation_range", tuple(float(a) for a in self.rotation_range))
        object.__setattr__(
            self, "intensity_scale_range", tuple(float(a) for a in self.intensity_scale_range)
        )
        probs = list(self.p_flip) + [self.p_rotate, self.p_elastic, self.p_channel_drop]
        if len(self.p_flip) != 3 or not all(0.0 <= p <= 1.0 for p in probs):
            raise ValueError("augmentation probabilities must lie in [0, 1]")
        lo, hi = self.intensity_scale_range
        if lo > hi:
            raise ValueError(f"intensity_scale_range lo > hi: {self.intensity_scale_range}")
        if self.rotation_range[0] > self.rotation_range[1]:
            raise ValueError(f"rotation_range lo > hi: {self.rotation_range}")
        if self.elastic_max_disp_mm < 0:
            raise ValueError("elastic_max_disp_mm must be >= 0")
        if self.elastic_grid_mm <= 0:
            raise ValueError("elastic_grid_mm must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def none(cls, seed: int = 0) -> "AugmentConfig":
        """A configuration that applies no transform."""
        return cls(p_flip=(0, 0, 0), p_rotate=0.0, intensity_scale_range=(1.0, 1.0),
                   p_elastic=0.0, p_channel_drop=0.0, seed=seed)


# ---------------------------------------------------------------------------
# modality dropout
# ---------------------------------------------------------------------------

def modality_dropout(channels: np.ndarray, present, rng: np.random.Generator,
                     p_drop: float = 0.25) -> np.ndarray:
    """Zero random present channels, never T1ce and never both T2 and FLAIR.

    Each droppable channel is dropped independently with ``p_drop``; draws
    that would remove every T2/FLAIR channel are rejected and redrawn.
    """
    if "T1ce" not in present:
        raise ValueError("modality dropout requires T1ce to be present")
    if "T2" not in present and "FLAIR" not in present:
        raise ValueError("modality dropout requires T2 or FLAIR to be present")
    if p_drop <= 0.0:
        return channels
    avail = np.array([m in present for m in MODALITIES])
    candidates = [c for c in range(len(MODALITIES)) if avail[c] and c != T1CE]
    t2_like = [c for c in T2_LIKE if avail[c]]
    for _ in range(_MAX_REDRAWS):
        drop = {c for c in candidates if rng.random() < p_drop}
        if any(c not in drop for c in t2_like):
            break
    else:
        # only reachable for p_drop ~ 1: keep one T2/FLAIR channel at random
        drop.discard(t2_like[int(rng.integers(len(t2_like)))])
    out = channels.copy()
    for c in drop:
        out[c] = 0.0
    return out


# ---------------------------------------------------------------------------
# flips
# ---------------------------------------------------------------------------

def flip(x: np.ndarray, mask: Optional[np.ndarray], axes: Sequence[int]):
    """Reverse the given spatial axes (0, 1, 2) of image and mask."""
    axes = tuple(int(a) for a in axes)
    if not axes:
        return x, mask
    x = np.flip(x, axis=tuple(a + 1 for a in axes)).copy()
    if mask is not None:
        mask = np.flip(mask, axis=axes).copy()
    return x, mask


def random_flip(x: np.ndarray, mask: Optional[np.ndarray], rng: np.random.Generator,
                cfg: AugmentConfig = AugmentConfig()):
    axes = [a for a in range(3) if rng.random() < cfg.p_flip[a]]
    return flip(x, mask, axes)


# ---------------------------------------------------------------------------
# axial rotation
# ---------------------------------------------------------------------------

def rotate_axial(x: np.ndarray, mask: Optional[np.ndarray], angle: float):
    """Rotate about the z (inferior-superior) axis by ``angle`` degrees.

    Positive angles turn spatial axis 0 towards axis 1. Multiples of 90
    degrees are exact index permutations (``np.rot90`` on axes (0, 1)), so a
    voxel ``(i, j, k)`` in an ``n x n`` plane goes to ``(n - 1 - j, i, k)``
    at +90. Other angles interpolate linearly (image) or nearest (mask)
    about the plane centre; dims are preserved and exposed corners are 0.
    """
    angle = float(angle)
    quarter = angle / 90.0
    if quarter == round(quarter):
        k = int(round(quarter)) % 4
        if k == 0:
            return x, mask
        if k % 2 and x.shape[1] != x.shape[2]:
            raise ValueError("90-degree rotation needs a square axial plane")
        x = np.rot90(x, k=k, axes=(1, 2)).copy()
        if mask is not None:
            mask = np.rot90(mask, k=k, axes=(0, 1)).copy()
        return x, mask
    x = np.stack([_rotate_plane(c, angle, 1) for c in x]).astype(x.dtype, copy=False)
    if mask is not None:
        mask = _rotate_plane(mask, angle, 0).astype(mask.dtype, copy=False)
    return x, mask


def _rotate_plane(vol: np.ndarray, angle: float, order: int) -> np.ndarray:
    # out[o] = in[R^-1 (o - c) + c] with R rotating axis 0 toward axis 1
    t = np.deg2rad(angle)
    c, s = np.cos(t), np.sin(t)
    inv = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    centre = (np.array(vol.shape, dtype=float) - 1.0) / 2.0
    offset = centre - inv @ centre
    return ndimage.affine_transform(vol, inv, offset=offset, order=order,
                                    mode="constant", cval=0.0)


def axial_rotate(x: np.ndarray, mask: Optional[np.ndarray], rng: np.random.Generator,
                 cfg: AugmentConfig = AugmentConfig()):
    if rng.random() >= cfg.p_rotate:
        return x, mask
    lo, hi = cfg.rotation_range
    angle = rng.uniform(lo, hi) if hi > lo else lo
    if cfg.rot90 and x.shape[1] == x.shape[2]:
        angle += 90.0 * int(rng.integers(4))
    return rotate_axial(x, mask, angle)


# ---------------------------------------------------------------------------
# intensity scaling
# ---------------------------------------------------------------------------

def scale_intensity(x: np.ndarray, factors: Sequence[float]) -> np.ndarray:
    out = x.copy()
    for c, f in enumerate(factors):
        out[c] *= np.float32(f)
    return out


def intensity_scale(x: np.ndarray, rng: np.random.Generator,
                    cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Multiply each channel by its own factor drawn from the configured range."""
    lo, hi = cfg.intensity_scale_range
    factors = rng.uniform(lo, hi, size=x.shape[0]) if hi > lo else np.full(x.shape[0], lo)
    if np.all(factors == 1.0):
        return x
    return scale_intensity(x, factors)


# ---------------------------------------------------------------------------
# elastic deformation
# ---------------------------------------------------------------------------

def random_displacement(shape, rng: np.random.Generator, grid_mm: float,
                        max_disp_mm: float, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Smooth displacement field in voxels, shape ``(3, X, Y, Z)``.

    Control-point vectors are drawn uniformly in a ball of radius
    ``max_disp_mm`` and trilinearly upsampled; interpolation is a convex
    combination, so no voxel moves further than ``max_disp_mm``.
    """
    spacing = np.asarray(spacing, dtype=float)
    extent = np.asarray(shape, dtype=float) * spacing
    ctrl = [max(2, int(np.ceil(e / grid_mm)) + 1) for e in extent]
    vec = rng.normal(size=(3, *ctrl))
    norm = np.linalg.norm(vec, axis=0, keepdims=True)
    norm[norm == 0] = 1.0
    radius = rng.random(size=(1, *ctrl)) ** (1.0 / 3.0) * max_disp_mm
    vec = vec / norm * radius  # mm
    coords = np.meshgrid(
        *[np.linspace(0.0, c - 1.0, n) for c, n in zip(ctrl, shape)], indexing="ij"
    )
    field = np.stack([
        ndimage.map_coordinates(vec[a], coords, order=1, mode="nearest") / spacing[a]
        for a in range(3)
    ])
    return field


def warp(vol: np.ndarray, field: np.ndarray, order: int) -> np.ndarray:
    """Sample ``vol`` at ``identity + field`` (voxel units)."""
    grid = np.indices(vol.shape, dtype=float)
    return ndimage.map_coordinates(vol, grid + field, order=order, mode="nearest").astype(
        vol.dtype, copy=False
    )


def elastic_deform(x: np.ndarray, mask: Optional[np.ndarray], rng: np.random.Generator,
                   cfg: AugmentConfig = AugmentConfig(), spacing=(1.0, 1.0, 1.0),
                   force: bool = False):
    """Apply one random smooth deformation to image (linear) and mask (nearest).

    ``force`` skips the ``p_elastic`` coin flip.
    """
    if cfg.elastic_max_disp_mm == 0:
        return x, mask
    if not force and rng.random() >= cfg.p_elastic:
        return x, mask
    field = random_displacement(x.shape[1:], rng, cfg.elastic_grid_mm,
                                cfg.elastic_max_disp_mm, spacing)
    x = np.stack([warp(c, field, 1) for c in x])
    if mask is not None:
        mask = warp(mask, field, 0)
    return x, mask


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def augment_sample(x: np.ndarray, mask: Optional[np.ndarray], present,
                   rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig(),
                   spacing=(1.0, 1.0, 1.0)):
    x = modality_dropout(x, present, rng, cfg.p_channel_drop)
    x, mask = random_flip(x, mask, rng, cfg)
    x, mask = axial_rotate(x, mask, rng, cfg)
    x, mask = elastic_deform(x, mask, rng, cfg, spacing)
    x = intensity_scale(x, rng, cfg)
    return np.ascontiguousarray(x, dtype=np.float32), (
        None if mask is None else np.ascontiguousarray(mask)
    )
