import struct

import numpy as np
import pytest

from gliopipe.io import (
    DatasetManifest,
    ManifestEntry,
    ManifestError,
    load_mask,
    load_roi,
    load_study_dir,
    load_volume,
    read_manifest,
    save_mask,
    save_roi,
    save_volume,
    write_manifest,
)
from gliopipe.roi import BoundingBox, TumorROI
from gliopipe.volume import LabelTriple, SegmentationMask, Volume


@pytest.mark.parametrize("ext", [".nii", ".nii.gz", ".glpv"])
def test_volume_roundtrip(tmp_path, ext):
    data = np.random.default_rng(0).normal(size=(5, 6, 7)).astype(np.float32)
    v = Volume(data, (1.5, 2.0, 0.5))
    p = save_volume(tmp_path / f"v{ext}", v)
    back = load_volume(p)
    np.testing.assert_array_equal(back.data, data)
    assert back.spacing == (1.5, 2.0, 0.5)


def test_glpv_layout(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    p = save_volume(tmp_path / "v.glpv", Volume(data, (1.0, 2.0, 3.0)))
    raw = p.read_bytes()
    assert raw[:4] == b"GLPV"
    assert struct.unpack_from("<3I", raw, 4) == (2, 3, 4)
    assert struct.unpack_from("<3f", raw, 16) == (1.0, 2.0, 3.0)
    assert raw[28] == 0
    np.testing.assert_array_equal(np.frombuffer(raw[29:], "<f4"), data.ravel())


def test_glpv_truncated(tmp_path):
    p = save_volume(tmp_path / "v.glpv", Volume(np.ones((2, 2, 2), np.float32)))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ValueError, match="voxels"):
        load_volume(p)


@pytest.mark.parametrize("ext", [".nii.gz", ".glpv"])
def test_mask_roundtrip(tmp_path, ext):
    m = SegmentationMask((np.random.default_rng(1).random((6, 6, 6)) > 0.5).astype(np.uint8))
    back = load_mask(save_mask(tmp_path / f"m{ext}", m))
    np.testing.assert_array_equal(back.data, m.data)


def test_roi_roundtrip(tmp_path):
    roi = TumorROI(np.ones((4, 16, 17, 18), np.float32), BoundingBox((1, 2, 3), (16, 18, 20)), "P7")
    back = load_roi(save_roi(tmp_path / "r.npz", roi))
    assert back.patient_id == "P7" and back.box == roi.box
    np.testing.assert_array_equal(back.channels, roi.channels)


def test_study_dir(tmp_path):
    for name in ("t1ce", "flair"):
        save_volume(tmp_path / "P1" / f"{name}.nii.gz", Volume(np.ones((4, 4, 4), np.float32)))
    s = load_study_dir(tmp_path / "P1")
    assert s.patient_id == "P1" and s.present == {"T1ce", "FLAIR"}


def _entry(tmp_path, pid, labels=LabelTriple(1, 0, None), split=None):
    paths = {}
    for name in ("T1ce", "T2"):
        paths[name] = save_volume(tmp_path / pid / f"{name.lower()}.nii", Volume(np.ones((4, 4, 4), np.float32)))
    return ManifestEntry(pid, paths, None, labels, split)


def test_manifest_roundtrip(tmp_path):
    m = DatasetManifest([_entry(tmp_path, "A"), _entry(tmp_path, "B", LabelTriple(None, 1, 1), "test")])
    p = write_manifest(tmp_path / "manifest.csv", m)
    text = p.read_text().splitlines()
    assert text[0] == "patient_id,t1,t1ce,t2,flair,mask,grade,idh,codel,split"
    assert text[1] == "A,,A/t1ce.nii,A/t2.nii,,,1,0,,"
    back = read_manifest(p)
    assert [e.labels for e in back] == [e.labels for e in m]
    assert back.entries[1].split == "test"
    assert back.entries[0].load_study().present == {"T1ce", "T2"}


def test_manifest_duplicate_ids(tmp_path):
    with pytest.raises(ManifestError, match="duplicate"):
        DatasetManifest([_entry(tmp_path, "A"), _entry(tmp_path, "A")])


def test_manifest_bad_label_reports_row_and_column(tmp_path):
    p = write_manifest(tmp_path / "m.csv", DatasetManifest([_entry(tmp_path, "A"), _entry(tmp_path, "B")]))
    lines = p.read_text().splitlines()
    lines[2] = lines[2].replace(",1,0,,", ",1,maybe,,")
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestError, match=r"row 3, column idh"):
        read_manifest(p)


def test_manifest_missing_file(tmp_path):
    p = write_manifest(tmp_path / "m.csv", DatasetManifest([_entry(tmp_path, "A")]))
    (tmp_path / "A" / "t2.nii").unlink()
    with pytest.raises(ManifestError, match="column t2"):
        read_manifest(p)
    assert len(read_manifest(p, check_paths=False)) == 1


def test_manifest_unknown_column(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("patient_id,t1,t1ce,t2,flair,mask,grade,idh,codel,split,age\n")
    with pytest.raises(ManifestError, match="age"):
        read_manifest(p)
