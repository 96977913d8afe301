"""Reading and writing volumes, masks, ROIs and dataset manifests.

Volumes are NIfTI-1 (``.nii`` / ``.nii.gz``) or the raw ``.glpv`` fallback::

    b"GLPV" | u32 nx, ny, nz | f32 sx, sy, sz | u8 dtype code | f32 voxels

All little-endian; voxels are row-major (C order) over ``(x, y, z)``.
Dtype code 0 marks an image, 1 a binary mask (still stored as f32).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Union

import nibabel as nib
import numpy as np

from .volume import MODALITIES, LabelTriple, MRIStudy, SegmentationMask, Volume

PathLike = Union[str, Path]

GLPV_MAGIC = b"GLPV"
_GLPV_HEADER = struct.Struct("<4s3I3fB")
GLPV_IMAGE = 0
GLPV_MASK = 1

MANIFEST_COLUMNS = (
    "patient_id", "t1", "t1ce", "t2", "flair", "mask", "grade", "idh", "codel", "split",
)
MODALITY_COLUMNS = dict(zip(MODALITIES, ("t1", "t1ce", "t2", "flair")))
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    """Malformed manifest content; message carries row/column context."""


# ---------------------------------------------------------------------------
# volumes
# ---------------------------------------------------------------------------

def _is_nifti(path: Path) -> bool:
    name = path.name.lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def _read_glpv(path: Path):
    raw = path.read_bytes()
    if len(raw) < _GLPV_HEADER.size or raw[:4] != GLPV_MAGIC:
        raise ValueError(f"{path}: not a GLPV file")
    _, nx, ny, nz, sx, sy, sz, code = _GLPV_HEADER.unpack_from(raw)
    n = nx * ny * nz
    body = raw[_GLPV_HEADER.size:]
    if len(body) != 4 * n:
        raise ValueError(f"{path}: expected {n} voxels, found {len(body) // 4}")
    data = np.frombuffer(body, dtype="<f4").reshape(nx, ny, nz).astype(np.float32)
    return data, (sx, sy, sz), code


def _write_glpv(path: Path, data: np.ndarray, spacing, code: int) -> None:
    header = _GLPV_HEADER.pack(GLPV_MAGIC, *data.shape, *spacing, code)
    path.write_bytes(header + np.ascontiguousarray(data, dtype="<f4").tobytes())


def _read_array(path: PathLike):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    if _is_nifti(path):
        img = nib.load(str(path))
        data = np.asarray(img.dataobj, dtype=np.float32)
        if data.ndim == 4 and data.shape[3] == 1:
            data = data[..., 0]
        spacing = tuple(float(s) for s in img.header.get_zooms()[:3])
        return data, spacing
    data, spacing, _ = _read_glpv(path)
    return data, spacing


def _write_array(path: PathLike, data: np.ndarray, spacing, dtype, code: int,
                 description: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if _is_nifti(path):
        affine = np.diag(list(spacing) + [1.0])
        img = nib.Nifti1Image(np.asarray(data, dtype=dtype), affine)
        img.header.set_zooms(tuple(spacing))
        if description:
            img.header["descrip"] = description.encode()[:79]
        nib.save(img, str(path))
    else:
        _write_glpv(path, np.asarray(data), spacing, code)
    return path


def load_volume(path: PathLike) -> Volume:
    data, spacing = _read_array(path)
    return Volume(data, spacing)


def save_volume(path: PathLike, vol: Volume, description: str = "") -> Path:
    return _write_array(path, vol.data, vol.spacing, np.float32, GLPV_IMAGE, description)


def load_mask(path: PathLike) -> SegmentationMask:
    data, spacing = _read_array(path)
    return SegmentationMask((data > 0.5).astype(np.uint8), spacing)


def save_mask(path: PathLike, mask: SegmentationMask, description: str = "") -> Path:
    return _write_array(path, mask.data, mask.spacing, np.uint8, GLPV_MASK, description)


def load_study_dir(path: PathLike, patient_id: Optional[str] = None) -> MRIStudy:
    """Load a study directory holding ``t1``/``t1ce``/``t2``/``flair`` files.

    Any of the supported extensions is accepted; missing files are absent
    modalities.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"{path}: study directory not found")
    mods = {}
    for name, stem in MODALITY_COLUMNS.items():
        for ext in (".nii.gz", ".nii", ".glpv"):
            f = path / f"{stem}{ext}"
            if f.exists():
                mods[name] = load_volume(f)
                break
    return MRIStudy(patient_id or path.name, mods)


# ---------------------------------------------------------------------------
# ROI container
# ---------------------------------------------------------------------------

def save_roi(path: PathLike, roi, description: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            channels=np.asarray(roi.channels, dtype=np.float32),
            lo=np.asarray(roi.box.lo, dtype=np.int64),
            hi=np.asarray(roi.box.hi, dtype=np.int64),
            patient_id=np.array(roi.patient_id),
            description=np.array(description),
        )
    return path


def load_roi(path: PathLike):
    from .roi import BoundingBox, TumorROI

    with np.load(Path(path), allow_pickle=False) as z:
        box = BoundingBox(tuple(int(v) for v in z["lo"]), tuple(int(v) for v in z["hi"]))
        return TumorROI(z["channels"].astype(np.float32), box, str(z["patient_id"]))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    patient_id: str
    modalities: Dict[str, Optional[Path]] = field(default_factory=dict)
    mask: Optional[Path] = None
    labels: LabelTriple = LabelTriple()
    split: Optional[str] = None

    def load_study(self) -> MRIStudy:
        mods = {}
        for name in MODALITIES:
            p = self.modalities.get(name)
            if p is not None:
                mods[name] = load_volume(p)
        return MRIStudy(self.patient_id, mods)

    def load_mask(self) -> Optional[SegmentationMask]:
        return load_mask(self.mask) if self.mask is not None else None


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.patient_id in seen:
                raise ManifestError(f"duplicate patient_id {e.patient_id!r}")
            seen.add(e.patient_id)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def subset(self, split: str) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.split == split])

    def by_id(self) -> Dict[str, ManifestEntry]:
        return {e.patient_id: e for e in self.entries}

    def check_paths(self) -> None:
        for row, e in enumerate(self.entries, start=2):
            paths = [(MODALITY_COLUMNS[m], p) for m, p in e.modalities.items() if p]
            if e.mask is not None:
                paths.append(("mask", e.mask))
            for col, p in paths:
                if not Path(p).exists():
                    raise ManifestError(f"row {row}, column {col}: file not found: {p}")


def _parse_label(value: str, row: int, col: str) -> Optional[int]:
    value = value.strip()
    if value == "":
        return None
    if value in ("0", "1"):
        return int(value)
    try:
        f = float(value)
    except ValueError:
        f = None
    if f in (0.0, 1.0):
        return int(f)
    raise ManifestError(f"row {row}, column {col}: label must be 0, 1 or empty, got {value!r}")


def read_manifest(path: PathLike, check_paths: bool = True) -> DatasetManifest:
    """Parse a manifest CSV; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        extra = [c for c in header if c not in MANIFEST_COLUMNS]
        if missing:
            raise ManifestError(f"{path}: missing column(s) {missing}")
        if extra:
            raise ManifestError(f"{path}: unknown column(s) {extra}")
        entries = []
        for row, rec in enumerate(reader, start=2):
            pid = (rec["patient_id"] or "").strip()
            if not pid:
                raise ManifestError(f"{path}: row {row}, column patient_id: empty")

            def _p(col):
                v = (rec[col] or "").strip()
                if not v:
                    return None
                p = Path(v)
                return p if p.is_absolute() else base / p

            split = (rec["split"] or "").strip() or None
            if split is not None and split not in SPLITS:
                raise ManifestError(
                    f"{path}: row {row}, column split: expected one of {SPLITS}, got {split!r}"
                )
            labels = LabelTriple(*(_parse_label(rec[c] or "", row, c) for c in ("grade", "idh", "codel")))
            entries.append(ManifestEntry(
                patient_id=pid,
                modalities={m: _p(col) for m, col in MODALITY_COLUMNS.items()},
                mask=_p("mask"),
                labels=labels,
                split=split,
            ))
    try:
        manifest = DatasetManifest(entries)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None
    if check_paths:
        manifest.check_paths()
    return manifest


def _rel(p: Optional[Path], base: Path) -> str:
    if p is None:
        return ""
    p = Path(p)
    try:
        return p.resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(p.resolve())


def write_manifest(path: PathLike, manifest: DatasetManifest) -> Path:
    """Write ``manifest`` as CSV with paths relative to the CSV location."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for e in manifest:
            lab = ["" if v is None else str(v) for v in e.labels.as_tuple()]
            w.writerow(
                [e.patient_id]
                + [_rel(e.modalities.get(m), base) for m in MODALITIES]
                + [_rel(e.mask, base)]
                + lab
                + [e.split or ""]
            )
    return path


def with_split(entries: Sequence[ManifestEntry], splits: Dict[str, Optional[str]]) -> DatasetManifest:
    return DatasetManifest([replace(e, split=splits.get(e.patient_id)) for e in entries])
