"""Run configuration: a YAML file with one section per pipeline stage.

Example::

    format_version: 1
    seed: 7
    manifest: cohort/manifest.csv      # relative to this file
    run_dir: runs/demo
    workers: 1
    fail_fast: false
    preprocess: {target_spacing: [1, 1, 1], order: 1}
    augment: {p_channel_drop: 0.25}
    seg:
      checkpoint: models/seg.pt        # or train: true
      threshold: 0.5
      epochs: 20
      patch_size: [32, 32, 32]
      base_filters: 8
      depth: 3
    classifier:
      checkpoint: models/clf.pt        # or train: true
      widths: [8, 16, 32, 64]
      margin: 4
      min_roi_dim: 16
    trainer: {lr: 1.0e-5, weight_decay: 0.01, batch_size: 8, epochs: 100}
    metrics: {thresholds: {grade: 0.5, idh: 0.5, codel: 0.45}}

Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .augment import AugmentConfig
from .classifier import ClassifierConfig
from .preprocess import PreprocessConfig
from .segmentation import SegTrainConfig, UNetConfig
from .trainer import ClfTrainConfig, SplitSpec
from .volume import TASKS

FORMAT_VERSION = 1

TOP_KEYS = {"format_version", "seed", "manifest", "run_dir", "workers", "fail_fast",
            "preprocess", "augment", "seg", "classifier", "trainer", "metrics"}
SEG_KEYS = {"checkpoint", "train", "threshold", "epochs", "lr", "batch_size", "patch_size",
            "p_tumor_patch", "base_filters", "depth", "seed"}
CLF_KEYS = {"checkpoint", "train", "widths", "residual", "min_roi_dim", "margin"}
TRAINER_KEYS = {"lr", "weight_decay", "batch_size", "epochs", "gamma", "alpha", "seed",
                "patience", "cosine", "split"}
METRICS_KEYS = {"thresholds", "split"}


class ConfigError(ValueError):
    pass


def _reject_unknown(section: str, d: Dict[str, Any], allowed) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {section}: {extra}")


def _names(cls) -> set:
    return {f.name for f in fields(cls)}


@dataclass
class RunConfig:
    raw: Dict[str, Any]
    base_dir: Path = Path(".")
    seed: int = 0
    manifest: Optional[Path] = None
    run_dir: Optional[Path] = None
    workers: int = 1
    fail_fast: bool = False
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seg_train: SegTrainConfig = field(default_factory=SegTrainConfig)
    seg_checkpoint: Optional[Path] = None
    seg_should_train: bool = False
    seg_threshold: float = 0.5
    clf_train: ClfTrainConfig = field(default_factory=ClfTrainConfig)
    clf_checkpoint: Optional[Path] = None
    clf_should_train: bool = False
    split: Optional[SplitSpec] = None
    thresholds: Dict[str, float] = field(default_factory=lambda: {t: 0.5 for t in TASKS})
    metrics_split: Optional[str] = None

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    def check_ready(self) -> None:
        """Fail before any work if inputs or checkpoints are missing."""
        if self.manifest is None:
            raise ConfigError("config has no manifest")
        if not self.manifest.exists():
            raise ConfigError(f"manifest not found: {self.manifest}")
        if self.run_dir is None:
            raise ConfigError("config has no run_dir")
        for what, ckpt, train in (("seg", self.seg_checkpoint, self.seg_should_train),
                                  ("classifier", self.clf_checkpoint, self.clf_should_train)):
            if train:
                continue
            if ckpt is None:
                raise ConfigError(f"{what}: no checkpoint given and train is false")
            if not ckpt.exists():
                raise ConfigError(f"{what}: checkpoint not found: {ckpt}")


def parse_config(raw: Dict[str, Any], base_dir=".") -> RunConfig:
    raw = dict(raw or {})
    base = Path(base_dir)
    _reject_unknown("config", raw, TOP_KEYS)
    version = raw.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported config format_version {version}")

    def path(v):
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else base / p

    seed = int(raw.get("seed", 0))
    try:
        pre = dict(raw.get("preprocess") or {})
        _reject_unknown("preprocess", pre, _names(PreprocessConfig))
        if "target_spacing" in pre:
            pre["target_spacing"] = tuple(pre["target_spacing"])
        preprocess = PreprocessConfig(**pre)

        aug = dict(raw.get("augment") or {})
        _reject_unknown("augment", aug, _names(AugmentConfig))
        aug.setdefault("seed", seed)
        augment = AugmentConfig(**aug)

        seg = dict(raw.get("seg") or {})
        _reject_unknown("seg", seg, SEG_KEYS)
        unet = UNetConfig(**{k: seg[k] for k in ("base_filters", "depth") if k in seg})
        seg_kwargs = {k: seg[k] for k in ("epochs", "lr", "batch_size", "p_tumor_patch") if k in seg}
        if "patch_size" in seg:
            seg_kwargs["patch_size"] = tuple(seg["patch_size"])
        seg_train = SegTrainConfig(seed=int(seg.get("seed", seed)), unet=unet, **seg_kwargs)

        clf = dict(raw.get("classifier") or {})
        _reject_unknown("classifier", clf, CLF_KEYS)
        model = ClassifierConfig(**{k: clf[k] for k in ("widths", "residual", "min_roi_dim") if k in clf})

        tr = dict(raw.get("trainer") or {})
        _reject_unknown("trainer", tr, TRAINER_KEYS)
        split_raw = tr.pop("split", None)
        split = None
        if split_raw is not None:
            _reject_unknown("trainer.split", split_raw, {"counts", "fractions", "seed", "stratify"})
            s = dict(split_raw)
            for k in ("counts", "fractions", "stratify"):
                if k in s:
                    s[k] = tuple(s[k])
            s.setdefault("seed", seed)
            split = SplitSpec(**s)
        tr.setdefault("seed", seed)
        clf_train = ClfTrainConfig(model=model, margin=int(clf.get("margin", 4)), **tr)

        met = dict(raw.get("metrics") or {})
        _reject_unknown("metrics", met, METRICS_KEYS)
        thr = met.get("thresholds", 0.5)
        if isinstance(thr, dict):
            _reject_unknown("metrics.thresholds", thr, TASKS)
            thresholds = {t: float(thr.get(t, 0.5)) for t in TASKS}
        else:
            thresholds = {t: float(thr) for t in TASKS}
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    return RunConfig(
        raw=raw,
        base_dir=base,
        seed=seed,
        manifest=path(raw.get("manifest")),
        run_dir=path(raw.get("run_dir")),
        workers=int(raw.get("workers", 1)),
        fail_fast=bool(raw.get("fail_fast", False)),
        preprocess=preprocess,
        augment=augment,
        seg_train=seg_train,
        seg_checkpoint=path(seg.get("checkpoint")),
        seg_should_train=bool(seg.get("train", False)),
        seg_threshold=float(seg.get("threshold", 0.5)),
        clf_train=clf_train,
        clf_checkpoint=path(clf.get("checkpoint")),
        clf_should_train=bool(clf.get("train", False)),
        split=split,
        thresholds=thresholds,
        metrics_split=met.get("split"),
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return parse_config(raw, path.parent)
