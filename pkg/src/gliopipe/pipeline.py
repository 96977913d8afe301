"""Stage functions over manifests and the end-to-end ``run`` orchestration.

Every stage works patient by patient; a failing patient is recorded and the
stage moves on unless ``fail_fast`` is set. The ``run`` command calls these
same functions, so running the stages one by one gives identical outputs.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .checkpoint import FORMAT_VERSION
from .classifier import MultiTaskClassifier, classifier_from_checkpoint, predict_with
from .io import (
    MODALITY_COLUMNS,
    DatasetManifest,
    ManifestEntry,
    load_roi,
    read_manifest,
    save_mask,
    save_roi,
    save_volume,
    write_manifest,
)
from .metrics import MetricsReport, report
from .preprocess import PreprocessConfig, preprocess_study
from .roi import DEFAULT_MARGIN, MIN_ROI_DIM, extract_roi
from .segmentation import Segmenter
from .volume import TASKS, MRIStudy

log = logging.getLogger(__name__)

PREDICTION_COLUMNS = ("patient_id", "p_gbm", "p_idhmut", "p_codel")


@dataclass
class Failure:
    patient_id: str
    stage: str
    error: str


class StageFailed(RuntimeError):
    pass


def _run_each(items: Sequence, fn: Callable, stage: str, key: Callable,
              workers: int = 1, fail_fast: bool = False):
    """Apply ``fn`` per item in order; returns ``(results, failures)``.

    Failed items get ``None`` in ``results``.
    """

    def guarded(item):
        try:
            return fn(item), None
        except Exception as exc:  # recorded per patient
            if fail_fast:
                raise
            return None, Failure(key(item), stage, f"{type(exc).__name__}: {exc}")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(guarded, items))
    else:
        pairs = [guarded(i) for i in items]
    failures = [f for _, f in pairs if f is not None]
    for f in failures:
        log.warning("%s failed for %s: %s", f.stage, f.patient_id, f.error)
    return [r for r, _ in pairs], failures


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def preprocess_manifest(manifest: DatasetManifest, out_dir, cfg: PreprocessConfig = PreprocessConfig(),
                        workers: int = 1, fail_fast: bool = False, description: str = ""):
    """Resample and normalize every study into ``out_dir/<patient>/``."""
    out_dir = Path(out_dir)

    def one(e: ManifestEntry) -> ManifestEntry:
        study, mask = preprocess_study(e.load_study(), e.load_mask(), cfg)
        pdir = out_dir / e.patient_id
        paths = {}
        for name, vol in study.modalities.items():
            if vol is not None:
                paths[name] = save_volume(pdir / f"{MODALITY_COLUMNS[name]}.nii.gz", vol, description)
        mask_path = save_mask(pdir / "mask.nii.gz", mask, description) if mask is not None else None
        return replace(e, modalities=paths, mask=mask_path)

    results, failures = _run_each(list(manifest), one, "preprocess", lambda e: e.patient_id,
                                  workers, fail_fast)
    return DatasetManifest([r for r in results if r is not None]), failures


def segment_manifest(manifest: DatasetManifest, checkpoint, out_dir, threshold: float = 0.5,
                     workers: int = 1, fail_fast: bool = False, description: str = ""):
    """Predict a mask per study; the returned manifest points ``mask`` at the predictions."""
    out_dir = Path(out_dir)
    segmenter = Segmenter(checkpoint)

    def one(e: ManifestEntry) -> ManifestEntry:
        mask = segmenter(e.load_study(), threshold)
        path = save_mask(out_dir / f"{e.patient_id}.nii.gz", mask, description)
        return replace(e, mask=path)

    results, failures = _run_each(list(manifest), one, "segment", lambda e: e.patient_id,
                                  workers, fail_fast)
    return DatasetManifest([r for r in results if r is not None]), failures


def extract_manifest_rois(manifest: DatasetManifest, out_dir, margin: int = DEFAULT_MARGIN,
                          min_roi_dim: int = MIN_ROI_DIM, workers: int = 1,
                          fail_fast: bool = False, description: str = ""):
    """Crop one ROI per patient from its ``mask``; writes ``index.csv`` in order."""
    out_dir = Path(out_dir)

    def one(e: ManifestEntry) -> Path:
        if e.mask is None:
            raise ValueError("no mask")
        roi = extract_roi(e.load_study(), e.load_mask(), margin, min_roi_dim)
        return save_roi(out_dir / f"{e.patient_id}.npz", roi, description)

    results, failures = _run_each(list(manifest), one, "extract-roi", lambda e: e.patient_id,
                                  workers, fail_fast)
    rows = [(e.patient_id, p) for e, p in zip(manifest, results) if p is not None]
    write_roi_index(out_dir / "index.csv", rows)
    return rows, failures


def write_roi_index(path, rows: Sequence[Tuple[str, Path]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "roi"])
        for pid, p in rows:
            w.writerow([pid, Path(p).name])
    return path


def read_roi_index(roi_dir) -> List[Tuple[str, Path]]:
    roi_dir = Path(roi_dir)
    index = roi_dir / "index.csv"
    if index.exists():
        with open(index, newline="") as fh:
            return [(r["patient_id"], roi_dir / r["roi"]) for r in csv.DictReader(fh)]
    return [(p.stem, p) for p in sorted(roi_dir.glob("*.npz"))]


def predict_rois(rois: Sequence[Tuple[str, Path]], checkpoint, workers: int = 1,
                 fail_fast: bool = False):
    model = classifier_from_checkpoint(checkpoint)

    def one(item) -> Tuple[float, float, float]:
        return predict_with(model, load_roi(item[1]))

    results, failures = _run_each(list(rois), one, "predict", lambda it: it[0], workers, fail_fast)
    preds = {pid: p for (pid, _), p in zip(rois, results) if p is not None}
    return preds, failures


def infer_patient(study: MRIStudy, segmenter: Segmenter, model: MultiTaskClassifier,
                  margin: int = DEFAULT_MARGIN, min_roi_dim: int = MIN_ROI_DIM,
                  threshold: float = 0.5):
    """Segment, crop and classify one preprocessed study."""
    mask = segmenter(study, threshold)
    roi = extract_roi(study, mask, margin, min_roi_dim)
    return mask, roi, predict_with(model, roi)


# ---------------------------------------------------------------------------
# predictions and evaluation
# ---------------------------------------------------------------------------

def write_predictions(path, preds: Dict[str, Tuple[float, float, float]],
                      order: Optional[Sequence[str]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = [p for p in (order or list(preds)) if p in preds]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        for pid in ids:
            w.writerow([pid] + [f"{v:.6f}" for v in preds[pid]])
    return path


def read_predictions(path) -> Dict[str, Tuple[float, float, float]]:
    from .io import ManifestError

    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in PREDICTION_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"{path}: missing column(s) {missing}")
        preds = {}
        for row, rec in enumerate(reader, start=2):
            vals = []
            for col in PREDICTION_COLUMNS[1:]:
                try:
                    v = float(rec[col])
                except (TypeError, ValueError):
                    raise ManifestError(f"{path}: row {row}, column {col}: not a number: {rec[col]!r}") from None
                if not 0.0 <= v <= 1.0:
                    raise ManifestError(f"{path}: row {row}, column {col}: {v} outside [0, 1]")
                vals.append(v)
            preds[rec["patient_id"]] = tuple(vals)
    return preds


def evaluate_predictions(preds: Dict[str, Tuple[float, float, float]], labels: DatasetManifest,
                         thresholds=0.5) -> MetricsReport:
    """Metrics over patients present in both the predictions and the manifest."""
    by_id = labels.by_id()
    ids = [pid for pid in preds if pid in by_id]
    if not ids:
        raise ValueError("no predictions match the label manifest")
    scores = {t: [preds[pid][k] for pid in ids] for k, t in enumerate(TASKS)}
    labs = {t: [getattr(by_id[pid].labels, t) for pid in ids] for t in TASKS}
    return report(scores, labs, thresholds)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def run_pipeline(config) -> Tuple[Path, List[Failure]]:
    """Preprocess, (optionally train,) segment, crop, classify and evaluate.

    ``config`` is a ``RunConfig`` or a path to a YAML config. Returns the run
    directory and the list of per-patient failures (also written to
    ``errors.json``).
    """
    from .config import RunConfig, load_config
    from .trainer import make_splits, train_classifier
    from .segmentation import train_segmenter

    cfg = config if isinstance(config, RunConfig) else load_config(config)
    cfg.check_ready()
    run = Path(cfg.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    tag = f"gliopipe v{FORMAT_VERSION} cfg={cfg.config_hash[:12]}"
    failures: List[Failure] = []

    manifest = read_manifest(cfg.manifest)
    if cfg.split is not None:
        manifest = make_splits(manifest, cfg.split)
    pre, f = preprocess_manifest(manifest, run / "preprocessed", cfg.preprocess,
                                 cfg.workers, cfg.fail_fast, tag)
    failures += f
    write_manifest(run / "preprocessed" / "manifest.csv", pre)

    # wall-clock seconds per training stage; kept out of run.json so that
    # reruns stay byte-identical
    timings = {}
    seg_ckpt = cfg.seg_checkpoint
    if cfg.seg_should_train:
        seg_ckpt = run / "segmenter.pt"
        t0 = time.perf_counter()
        train_segmenter(pre, cfg.seg_train, cfg.augment, seg_ckpt)
        timings["train_seg"] = time.perf_counter() - t0
    clf_ckpt = cfg.clf_checkpoint
    if cfg.clf_should_train:
        clf_ckpt = run / "classifier.pt"
        t0 = time.perf_counter()
        train_classifier(pre, cfg.clf_train, cfg.augment, clf_ckpt,
                         log_path=run / "classifier_log.jsonl")
        timings["train_clf"] = time.perf_counter() - t0
    (run / "timings.json").write_text(json.dumps(timings, indent=2) + "\n")

    segmented, f = segment_manifest(pre, seg_ckpt, run / "masks", cfg.seg_threshold,
                                    cfg.workers, cfg.fail_fast, tag)
    failures += f
    write_manifest(run / "masks" / "manifest.csv", segmented)
    rois, f = extract_manifest_rois(segmented, run / "rois", cfg.clf_train.margin,
                                    cfg.clf_train.model.min_roi_dim, cfg.workers,
                                    cfg.fail_fast, tag)
    failures += f
    preds, f = predict_rois(rois, clf_ckpt, cfg.workers, cfg.fail_fast)
    failures += f
    write_predictions(run / "predictions.csv", preds, [e.patient_id for e in manifest])

    eval_set = manifest if cfg.metrics_split is None else manifest.subset(cfg.metrics_split)
    meta = {"config_hash": cfg.config_hash}
    try:
        rep = evaluate_predictions(preds, eval_set, cfg.thresholds)
        (run / "metrics.json").write_text(rep.to_json(**meta))
        (run / "metrics.txt").write_text(rep.table())
    except ValueError as exc:
        failures.append(Failure("*", "evaluate", str(exc)))

    errors_path = run / "errors.json"
    if failures:
        errors_path.write_text(json.dumps([f.__dict__ for f in failures], indent=2) + "\n")
    elif errors_path.exists():
        errors_path.unlink()
    artifacts = sorted(p.relative_to(run).as_posix() for p in run.iterdir())
    (run / "run.json").write_text(json.dumps({
        "format_version": FORMAT_VERSION,
        "config_hash": cfg.config_hash,
        "patients": len(manifest),
        "failures": len(failures),
        "artifacts": artifacts,
    }, indent=2) + "\n")
    return run, failures
