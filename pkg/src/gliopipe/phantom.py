"""Synthetic brain phantoms with planted tumors and label signatures.

Each label is tied to one visual signature, strong enough that a simple
hand-written rule recovers it:

* grade (GBM): bright T1ce rim around a dark necrotic core; LGG tumors are
  uniformly mildly hypointense on T1ce.
* IDH mutant: fine sinusoidal texture (period 4 voxels) inside the tumor on
  T2 and FLAIR; wildtype tumors carry a coarse texture (period 16).
* 1p19q co-deleted: elongated lesion (axis ratio ~1.9); intact lesions are
  near-spherical.

All tumors are hyperintense on T2/FLAIR so the whole-tumor mask is visible
whichever of the two is acquired.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .io import DatasetManifest, ManifestEntry, save_mask, save_volume, write_manifest
from .volume import MODALITIES, LabelTriple, MRIStudy, SegmentationMask, Volume

BRAIN_LEVEL = {"T1": 1.0, "T1ce": 0.8, "T2": 0.6, "FLAIR": 0.7}
TUMOR_LEVEL = {"T1": 0.6, "T1ce": 0.6, "T2": 1.5, "FLAIR": 1.6}
GBM_RIM = 1.9
GBM_CORE = 0.3
RIM_START = 0.65  # normalized ellipsoid radius where the enhancing rim begins
CORE_END = 0.45
TEXTURE_AMPLITUDE = 0.35
TEXTURE_PERIOD = {1: 4.0, 0: 16.0}  # IDH status -> period in voxels
CODEL_STRETCH = (1.45, 0.78, 0.78)

# legal ways of dropping acquisitions: T1ce is always kept, plus T2 or FLAIR
MISSING_PATTERNS = (("T1",), ("T2",), ("FLAIR",), ("T1", "T2"), ("T1", "FLAIR"))


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int] = (32, 32, 32)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    brain_radii: Optional[Tuple[float, float, float]] = None  # voxels; default 0.42 * dims
    tumor_center: Optional[Tuple[float, float, float]] = None  # voxels; default volume centre
    tumor_radii: Tuple[float, float, float] = (6.0, 6.0, 6.0)
    grade: int = 1
    idh: int = 0
    codel: int = 0
    texture_phase: float = 0.0
    noise_sigma: float = 0.05
    missing: Tuple[str, ...] = ()

    def brain(self) -> np.ndarray:
        r = self.brain_radii or tuple(0.42 * n for n in self.dims)
        return np.asarray(r, dtype=float)

    def centre(self) -> np.ndarray:
        c = self.tumor_center
        if c is None:
            c = tuple((n - 1) / 2.0 for n in self.dims)
        return np.asarray(c, dtype=float)


def _grid(dims):
    return np.meshgrid(*[np.arange(n, dtype=float) for n in dims], indexing="ij")


def ellipsoid_radius(dims, centre, radii) -> np.ndarray:
    """Normalized ellipsoid radius of each voxel centre (<= 1 means inside)."""
    g = _grid(dims)
    return np.sqrt(sum(((g[a] - centre[a]) / radii[a]) ** 2 for a in range(3)))


def _check(spec: PhantomSpec):
    if len(spec.dims) != 3 or min(spec.dims) < 8:
        raise ValueError(f"phantom dims must be 3 values >= 8, got {spec.dims}")
    if min(spec.tumor_radii) <= 0:
        raise ValueError("tumor radii must be positive")
    for v in (spec.grade, spec.idh, spec.codel):
        if v not in (0, 1):
            raise ValueError("planted labels must be 0 or 1")
    bad = set(spec.missing) - set(MODALITIES)
    if bad:
        raise ValueError(f"unknown modalities {sorted(bad)}")
    if "T1ce" in spec.missing or {"T2", "FLAIR"} <= set(spec.missing):
        raise ValueError("phantom must keep T1ce and one of T2/FLAIR")


def generate_phantom(spec: PhantomSpec, rng: Optional[np.random.Generator] = None):
    """Build ``(study, mask, labels)``; ``rng`` drives only the noise."""
    _check(spec)
    rng = rng if rng is not None else np.random.default_rng(0)
    dims = tuple(int(n) for n in spec.dims)
    brain_c = np.array([(n - 1) / 2.0 for n in dims])
    brain = ellipsoid_radius(dims, brain_c, spec.brain()) <= 1.0
    rho = ellipsoid_radius(dims, spec.centre(), np.asarray(spec.tumor_radii, dtype=float))
    tumor = rho <= 1.0
    if not tumor.any():
        raise ValueError("tumor contains no voxel centres")
    if (tumor & ~brain).any():
        raise ValueError("tumor extends outside the brain")

    g = _grid(dims)
    period = TEXTURE_PERIOD[spec.idh]
    texture = TEXTURE_AMPLITUDE * np.cos(
        2 * np.pi * (g[0] + g[1] + g[2]) / period + spec.texture_phase
    )

    vols: Dict[str, Volume] = {}
    for name in MODALITIES:
        img = np.where(brain, BRAIN_LEVEL[name], 0.0)
        level = np.full(dims, TUMOR_LEVEL[name])
        if name in ("T2", "FLAIR"):
            level = level + texture
        if name == "T1ce" and spec.grade == 1:
            level = np.where(rho >= RIM_START, GBM_RIM, level)
            level = np.where(rho < CORE_END, GBM_CORE, level)
        img = np.where(tumor, level, img)
        img = img + rng.normal(0.0, spec.noise_sigma, size=dims)
        if name not in spec.missing:
            vols[name] = Volume(img.astype(np.float32), spec.spacing)
    study = MRIStudy("phantom", vols)
    mask = SegmentationMask(tumor.astype(np.uint8), spec.spacing)
    return study, mask, LabelTriple(spec.grade, spec.idh, spec.codel)


def sample_spec(rng: np.random.Generator, grade: int, idh: int, codel: int,
                dims=(32, 32, 32), missing: Sequence[str] = (),
                radius_range=(4.5, 6.5), noise_sigma: float = 0.05) -> PhantomSpec:
    """Random tumor geometry for the given planted labels."""
    r = rng.uniform(*radius_range)
    if codel:
        radii = np.array(CODEL_STRETCH) * r
    else:
        radii = r * rng.uniform(0.93, 1.07, size=3)
    radii = radii[rng.permutation(3)]
    brain_r = np.array([0.42 * n for n in dims])
    room = np.maximum(brain_r - radii.max() - 1.5, 0.0) * 0.6
    centre = np.array([(n - 1) / 2.0 for n in dims]) + rng.uniform(-1, 1, size=3) * room
    return PhantomSpec(
        dims=tuple(dims), tumor_center=tuple(centre), tumor_radii=tuple(radii),
        grade=grade, idh=idh, codel=codel,
        texture_phase=float(rng.uniform(0, 2 * np.pi)),
        noise_sigma=noise_sigma, missing=tuple(missing),
    )


def _balanced(n: int, prior: float, rng: np.random.Generator) -> np.ndarray:
    k = int(round(prior * n))
    labels = np.array([1] * k + [0] * (n - k))
    return labels[rng.permutation(n)]


def _blank_rows(n: int, fraction: float, rng: np.random.Generator) -> set:
    k = int(round(fraction * n))
    return set(rng.permutation(n)[:k].tolist())


def generate_cohort(n: int, out_dir, seed: int = 0, dims=(32, 32, 32),
                    missing_label_fractions: Optional[Dict[str, float]] = None,
                    priors: Optional[Dict[str, float]] = None,
                    p_missing_modality: float = 0.25, ext: str = ".nii.gz",
                    noise_sigma: float = 0.05) -> DatasetManifest:
    """Write ``n`` phantoms under ``out_dir`` plus ``out_dir/manifest.csv``.

    Class counts and the number of blank labels per task are exact
    (``round(prior * n)`` and ``round(fraction * n)``), assigned by seeded
    permutation.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    fractions = {"grade": 0.0, "idh": 0.0, "codel": 0.0, **(missing_label_fractions or {})}
    priors = {"grade": 0.5, "idh": 0.5, "codel": 0.5, **(priors or {})}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    root = np.random.SeedSequence(seed)
    label_rng = np.random.default_rng(root.spawn(1)[0])
    planted = {t: _balanced(n, priors[t], label_rng) for t in ("grade", "idh", "codel")}
    blanks = {t: _blank_rows(n, fractions[t], label_rng) for t in ("grade", "idh", "codel")}
    child_seeds = root.spawn(n)

    entries = []
    width = max(3, len(str(n - 1)))
    for i in range(n):
        rng = np.random.default_rng(child_seeds[i])
        missing = ()
        if rng.random() < p_missing_modality:
            missing = MISSING_PATTERNS[int(rng.integers(len(MISSING_PATTERNS)))]
        spec = sample_spec(rng, int(planted["grade"][i]), int(planted["idh"][i]),
                           int(planted["codel"][i]), dims=dims, missing=missing,
                           noise_sigma=noise_sigma)
        pid = f"P{i:0{width}d}"
        study, mask, truth = generate_phantom(spec, rng)
        pdir = out / pid
        try:
            paths = {}
            for name, vol in study.modalities.items():
                if vol is not None:
                    paths[name] = save_volume(pdir / f"{name.lower()}{ext}", vol)
            mask_path = save_mask(pdir / f"mask{ext}", mask)
        except OSError as exc:
            raise OSError(f"{pid}: writing phantom to {pdir} failed: {exc}") from exc
        labels = LabelTriple(*[None if i in blanks[t] else v
                               for t, v in zip(("grade", "idh", "codel"), truth.as_tuple())])
        entries.append(ManifestEntry(pid, paths, mask_path, labels, None))
    manifest = DatasetManifest(entries)
    write_manifest(out / "manifest.csv", manifest)
    return manifest


def hand_rule_grade(study: MRIStudy, mask: SegmentationMask) -> int:
    """Grade from mean T1ce on the tumor boundary shell versus the brain."""
    from scipy import ndimage

    t1ce = np.asarray(study.modalities["T1ce"].data, dtype=float)
    tumor = mask.data.astype(bool)
    shell = tumor & ~ndimage.binary_erosion(tumor, iterations=1)
    brain_level = np.median(t1ce[ndimage.binary_dilation(tumor, iterations=3) & ~tumor])
    return int(t1ce[shell].mean() - brain_level > 0.5)
