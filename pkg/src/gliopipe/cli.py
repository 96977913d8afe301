"""``gliopipe`` command line.

Exit codes: 0 ok, 1 usage, 2 data validation, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, load_config, parse_config
from .io import ManifestError, load_mask, load_study_dir, read_manifest, save_mask, save_roi, write_manifest
from .metrics import threshold_sweep
from .preprocess import PreprocessConfig, PreprocessError
from .volume import TASKS, StudyError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("gliopipe")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _triple(text: str, cast=float):
    parts = [p for p in text.replace("x", ",").split(",") if p]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    return tuple(cast(p) for p in parts)


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", type=Path, help="YAML run config (see gliopipe.config)")
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
    p.add_argument("--out", type=Path, help=out_help)
    p.add_argument("--workers", type=int, default=1, help="patient-level parallel workers")
    p.add_argument("-v", "--verbose", action="store_true")


def _load_cfg(args):
    if args.config is None:
        cfg = parse_config({})
    else:
        cfg = load_config(args.config)
    if args.seed is not None:
        raw = dict(cfg.raw)
        raw["seed"] = args.seed
        for section in ("augment", "seg", "trainer"):
            if isinstance(raw.get(section), dict):
                raw[section] = {k: v for k, v in raw[section].items() if k != "seed"}
        cfg = parse_config(raw, cfg.base_dir)
    return cfg


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required")


def _report_failures(failures) -> int:
    for f in failures:
        print(f"FAILED {f.patient_id} [{f.stage}]: {f.error}", file=sys.stderr)
    return EXIT_RUNTIME if failures else EXIT_OK


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate_phantoms(args) -> int:
    from .phantom import generate_cohort

    _require(args, "out")
    seed = args.seed if args.seed is not None else 0
    fractions = {"grade": args.grade_missing, "idh": args.idh_missing, "codel": args.codel_missing}
    m = generate_cohort(args.n, args.out, seed=seed, dims=args.dims,
                        missing_label_fractions=fractions,
                        p_missing_modality=args.p_missing_modality, ext=args.ext)
    print(f"wrote {len(m)} phantoms and {args.out / 'manifest.csv'}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    _require(args, "manifest", "out")
    cfg = _load_cfg(args)
    pre = cfg.preprocess
    if args.spacing is not None or args.order is not None:
        pre = PreprocessConfig(args.spacing or pre.target_spacing,
                               args.order if args.order is not None else pre.order)
    manifest = read_manifest(args.manifest)
    out, failures = pipeline.preprocess_manifest(manifest, args.out, pre, args.workers)
    write_manifest(args.out / "manifest.csv", out)
    print(f"preprocessed {len(out)}/{len(manifest)} studies -> {args.out / 'manifest.csv'}")
    return _report_failures(failures)


def cmd_train_seg(args) -> int:
    from .segmentation import train_segmenter

    _require(args, "manifest", "out")
    cfg = _load_cfg(args)
    payload = train_segmenter(read_manifest(args.manifest), cfg.seg_train, cfg.augment, args.out)
    last = payload["log"][-1]
    print(f"saved {args.out}; final train loss {last['train_loss']:.4f}"
          + (f", val dice {last['val_dice']:.4f}" if "val_dice" in last else ""))
    return EXIT_OK


def cmd_segment(args) -> int:
    from .segmentation import segment

    _require(args, "checkpoint", "out")
    cfg = _load_cfg(args)
    threshold = args.threshold if args.threshold is not None else cfg.seg_threshold
    if (args.study is None) == (args.manifest is None):
        raise UsageError("give exactly one of --study or --manifest")
    if args.study is not None:
        mask = segment(load_study_dir(args.study), args.checkpoint, threshold)
        save_mask(args.out, mask)
        print(f"wrote {args.out} ({mask.voxel_count} tumor voxels)")
        return EXIT_OK
    manifest = read_manifest(args.manifest)
    out, failures = pipeline.segment_manifest(manifest, args.checkpoint, args.out, threshold,
                                              args.workers)
    write_manifest(args.out / "manifest.csv", out)
    print(f"segmented {len(out)}/{len(manifest)} studies -> {args.out / 'manifest.csv'}")
    return _report_failures(failures)


def cmd_extract_roi(args) -> int:
    from .roi import extract_roi

    _require(args, "out")
    cfg = _load_cfg(args)
    margin = args.margin if args.margin is not None else cfg.clf_train.margin
    min_dim = args.min_roi_dim if args.min_roi_dim is not None else cfg.clf_train.model.min_roi_dim
    if args.study is not None:
        _require(args, "mask")
        roi = extract_roi(load_study_dir(args.study), load_mask(args.mask), margin, min_dim)
        save_roi(args.out, roi)
        print(f"wrote {args.out}: box {roi.box.lo}-{roi.box.hi}, dims {roi.dims}")
        return EXIT_OK
    _require(args, "manifest")
    rows, failures = pipeline.extract_manifest_rois(read_manifest(args.manifest), args.out,
                                                    margin, min_dim, args.workers)
    print(f"wrote {len(rows)} ROIs -> {args.out / 'index.csv'}")
    return _report_failures(failures)


def cmd_train_clf(args) -> int:
    from .segmentation import Segmenter
    from .trainer import train_classifier

    _require(args, "manifest", "out")
    cfg = _load_cfg(args)
    segmenter = Segmenter(args.seg_checkpoint) if args.seg_checkpoint else None
    log_path = args.log or args.out.with_suffix(".jsonl")
    payload = train_classifier(read_manifest(args.manifest), cfg.clf_train, cfg.augment, args.out,
                               log_path=log_path, segmenter=segmenter)
    losses = [r["train_loss"] for r in payload["log"] if "train_loss" in r]
    print(f"saved {args.out}; {len(losses)} epochs, final train loss {losses[-1]:.4f}; log {log_path}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .io import load_roi

    _require(args, "checkpoint", "out")
    if args.roi is not None:
        rois = [(load_roi(args.roi).patient_id, args.roi)]
    elif args.rois is not None:
        rois = pipeline.read_roi_index(args.rois)
    else:
        raise UsageError("give --roi or --rois")
    preds, failures = pipeline.predict_rois(rois, args.checkpoint, args.workers)
    pipeline.write_predictions(args.out, preds, [pid for pid, _ in rois])
    print(f"wrote {len(preds)} predictions -> {args.out}")
    return _report_failures(failures)


def cmd_evaluate(args) -> int:
    _require(args, "predictions", "labels", "out")
    cfg = _load_cfg(args)
    thresholds = {t: args.threshold for t in TASKS} if args.threshold is not None else cfg.thresholds
    preds = pipeline.read_predictions(args.predictions)
    labels = read_manifest(args.labels, check_paths=False)
    rep = pipeline.evaluate_predictions(preds, labels, thresholds)
    extra = {}
    if args.sweep:
        by_id = labels.by_id()
        grid = [round(i / 100, 2) for i in range(101)]
        sweeps = {}
        for k, t in enumerate(TASKS):
            pairs = [(preds[p][k], getattr(by_id[p].labels, t)) for p in preds if p in by_id]
            pairs = [(s, y) for s, y in pairs if y is not None]
            if pairs:
                s, y = zip(*pairs)
                sweeps[t] = [dict(zip(("threshold", "sensitivity", "specificity", "accuracy"), r))
                             for r in threshold_sweep(s, y, grid)]
        extra["sweep"] = sweeps
    args.out.parent.mkdir(parents=True, exist_ok=True)
    d = rep.to_dict()
    d.update(extra)
    args.out.write_text(json.dumps(d, indent=2) + "\n")
    table = rep.table()
    args.out.with_suffix(".txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_run(args) -> int:
    if args.config is None:
        raise UsageError("--config is required")
    cfg = _load_cfg(args)
    if args.out is not None:
        raw = dict(cfg.raw)
        raw["run_dir"] = str(args.out.resolve())
        cfg = parse_config(raw, cfg.base_dir)
    cfg.workers = max(cfg.workers, args.workers)
    run_dir, failures = pipeline.run_pipeline(cfg)
    print(f"run complete: {run_dir}")
    metrics_txt = run_dir / "metrics.txt"
    if metrics_txt.exists():
        print(metrics_txt.read_text(), end="")
    return _report_failures(failures)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gliopipe", description="Glioma segmentation and multi-task classification")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("generate-phantoms", help="write a synthetic phantom cohort")
    _common(p, "output directory")
    p.add_argument("--n", type=int, default=32, help="number of phantoms")
    p.add_argument("--dims", type=lambda s: _triple(s, int), default=(32, 32, 32))
    p.add_argument("--grade-missing", type=float, default=0.0, help="fraction of blank grade labels")
    p.add_argument("--idh-missing", type=float, default=0.0, help="fraction of blank IDH labels")
    p.add_argument("--codel-missing", type=float, default=0.0, help="fraction of blank 1p19q labels")
    p.add_argument("--p-missing-modality", type=float, default=0.25)
    p.add_argument("--ext", default=".nii.gz", choices=(".nii.gz", ".nii", ".glpv"))
    p.set_defaults(func=cmd_generate_phantoms)

    p = sub.add_parser("preprocess", help="resample to isotropic spacing and z-score")
    _common(p, "output directory")
    p.add_argument("--manifest", type=Path, help="input manifest CSV")
    p.add_argument("--spacing", type=_triple, default=None, help="target spacing in mm, e.g. 1,1,1")
    p.add_argument("--order", type=int, choices=(0, 1, 3), default=None, help="image interpolation order")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train-seg", help="train the whole-tumor U-Net")
    _common(p, "checkpoint path")
    p.add_argument("--manifest", type=Path, help="preprocessed manifest with masks")
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("segment", help="predict whole-tumor masks")
    _common(p, "mask file (with --study) or directory (with --manifest)")
    p.add_argument("--study", type=Path, help="study directory with t1/t1ce/t2/flair files")
    p.add_argument("--manifest", type=Path, help="preprocessed manifest")
    p.add_argument("--checkpoint", type=Path, help="segmenter checkpoint")
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("extract-roi", help="crop tumor bounding-box ROIs")
    _common(p, "ROI .npz (with --study) or directory (with --manifest)")
    p.add_argument("--study", type=Path, help="study directory")
    p.add_argument("--mask", type=Path, help="mask file for --study")
    p.add_argument("--manifest", type=Path, help="manifest whose mask column holds the masks")
    p.add_argument("--margin", type=int, default=None)
    p.add_argument("--min-roi-dim", type=int, default=None)
    p.set_defaults(func=cmd_extract_roi)

    p = sub.add_parser("train-clf", help="train the multi-task classifier")
    _common(p, "checkpoint path")
    p.add_argument("--manifest", type=Path, help="preprocessed manifest")
    p.add_argument("--seg-checkpoint", type=Path, help="segmenter for rows without masks")
    p.add_argument("--log", type=Path, help="JSON-lines training log (default: <out>.jsonl)")
    p.set_defaults(func=cmd_train_clf)

    p = sub.add_parser("predict", help="classify ROIs")
    _common(p, "predictions CSV")
    p.add_argument("--roi", type=Path, help="single ROI .npz")
    p.add_argument("--rois", type=Path, help="ROI directory (uses index.csv order)")
    p.add_argument("--checkpoint", type=Path, help="classifier checkpoint")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics from a predictions CSV")
    _common(p, "report JSON path (a .txt table is written alongside)")
    p.add_argument("--predictions", type=Path)
    p.add_argument("--labels", type=Path, help="manifest CSV with ground-truth labels")
    p.add_argument("--threshold", type=float, default=None, help="decision threshold for all tasks")
    p.add_argument("--sweep", action="store_true", help="add a 101-point threshold sweep")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="end-to-end pipeline from a config file")
    _common(p, "run directory (overrides config run_dir)")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gliopipe {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ManifestError, ConfigError, StudyError, PreprocessError, FileNotFoundError) as exc:
        print(f"gliopipe {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CheckpointError, RuntimeError, ValueError, OSError) as exc:
        print(f"gliopipe {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
