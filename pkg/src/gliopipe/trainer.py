"""Classifier training: dataset splits, the optimizer recipe and evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .augment import AugmentConfig, augment_sample
from .checkpoint import make_checkpoint, save_checkpoint
from .classifier import (
    ClassifierConfig,
    MultiTaskClassifier,
    batch_task_weights,
    build_classifier,
    classifier_from_checkpoint,
    masked_multitask_loss,
    model_config_dict,
    predict_with,
    weighted_sample_loss,
)
from .io import DatasetManifest, ManifestEntry, with_split
from .metrics import MetricsReport, report
from .roi import DEFAULT_MARGIN, MIN_ROI_DIM, TumorROI, extract_roi
from .volume import TASKS, LabelTriple

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """Either explicit ``counts`` or ``fractions`` for (train, val, test)."""

    counts: Optional[Tuple[int, int, int]] = None
    fractions: Optional[Tuple[float, float, float]] = None
    stratify: Tuple[str, ...] = TASKS
    seed: int = 0

    def __post_init__(self):
        if (self.counts is None) == (self.fractions is None):
            raise ValueError("give exactly one of counts or fractions")
        bad = set(self.stratify) - set(TASKS)
        if bad:
            raise ValueError(f"unknown stratification keys {sorted(bad)}")

    def resolve(self, n: int) -> Tuple[int, int, int]:
        if self.counts is not None:
            tr, va, te = (int(c) for c in self.counts)
            if min(tr, va, te) < 0 or tr + va + te != n:
                raise ValueError(f"split counts {self.counts} do not partition {n} patients")
            return tr, va, te
        fr = tuple(float(f) for f in self.fractions)
        if min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions {fr} must be >= 0 and sum to 1")
        va, te = int(round(fr[1] * n)), int(round(fr[2] * n))
        return n - va - te, va, te


def _stratified_order(entries: Sequence[ManifestEntry], keys, rng) -> List[int]:
    """Indices interleaved so every prefix is close to proportional per stratum."""
    strata: Dict[tuple, List[int]] = {}
    for i, e in enumerate(entries):
        k = tuple(getattr(e.labels, t) for t in keys)
        strata.setdefault(tuple(-1 if v is None else v for v in k), []).append(i)
    keyed = []
    for k in sorted(strata):
        members = [strata[k][j] for j in rng.permutation(len(strata[k]))]
        offsets = rng.random(len(members))
        for rank, (i, u) in enumerate(zip(members, offsets)):
            keyed.append(((rank + u) / len(members), i))
    keyed.sort()
    return [i for _, i in keyed]


def make_splits(manifest: DatasetManifest, spec: SplitSpec) -> DatasetManifest:
    """Tag entries train/val/test; val and test only draw fully labeled patients."""
    entries = list(manifest)
    n_train, n_val, n_test = spec.resolve(len(entries))
    eligible = [e for e in entries if e.labels.complete]
    if n_val + n_test > len(eligible):
        raise ValueError(
            f"need {n_val + n_test} fully labeled patients for val+test, "
            f"only {len(eligible)} available"
        )
    rng = np.random.default_rng(spec.seed)
    order = _stratified_order(eligible, spec.stratify, rng)
    held = [eligible[i] for i in order[: n_val + n_test]]
    order2 = _stratified_order(held, spec.stratify, rng)
    tags = {e.patient_id: "train" for e in entries}
    for rank, i in enumerate(order2):
        tags[held[i].patient_id] = "val" if rank < n_val else "test"
    return with_split(entries, tags)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClfTrainConfig:
    lr: float = 1e-5
    weight_decay: float = 1e-2
    batch_size: int = 8
    epochs: int = 100
    gamma: float = 2.0
    alpha: float = 0.5
    seed: int = 0
    patience: int = 20
    cosine: bool = False
    margin: int = DEFAULT_MARGIN
    model: ClassifierConfig = field(default_factory=ClassifierConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", ClassifierConfig(**self.model))
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = model_config_dict(self.model)
        return d


@dataclass
class Case:
    roi: TumorROI
    labels: LabelTriple
    present: frozenset


def build_cases(manifest: DatasetManifest, margin: int, min_roi_dim: int,
                segmenter=None) -> List[Case]:
    """ROIs from ground-truth masks where available, else from ``segmenter``."""
    cases = []
    for e in manifest:
        study = e.load_study()
        mask = e.load_mask()
        if mask is None:
            if segmenter is None:
                raise ValueError(f"{e.patient_id}: no mask and no segmenter to make one")
            mask = segmenter(study)
        cases.append(Case(extract_roi(study, mask, margin, min_roi_dim), e.labels, study.present))
    return cases


def make_optimizer(model: torch.nn.Module, cfg: ClfTrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def accumulate_batch(model: MultiTaskClassifier, inputs: Sequence[np.ndarray],
                     labels: Sequence[LabelTriple], gamma: float, alpha: float):
    """Backpropagate one batch as single-sample passes.

    Each sample's loss is weighted so the accumulated gradient equals that
    of ``masked_multitask_loss`` on the whole batch. Returns the batch loss
    and its per-task parts (from the detached logits).
    """
    weights = batch_task_weights(labels)
    collected = []
    for i, x in enumerate(inputs):
        logits = model(torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))[None])
        loss_i = weighted_sample_loss(logits, [labels[i]], weights[i: i + 1], gamma, alpha)
        loss_i.backward()
        collected.append(logits.detach())
    return masked_multitask_loss(torch.cat(collected).double(), labels, gamma, alpha,
                                 return_tasks=True)


def _val_metrics(model, cases: Sequence[Case]) -> Tuple[MetricsReport, Optional[float]]:
    model.eval()
    probs = [predict_with(model, c.roi) for c in cases]
    scores = {t: [p[k] for p in probs] for k, t in enumerate(TASKS)}
    labels = {t: [getattr(c.labels, t) for c in cases] for t in TASKS}
    rep = report(scores, labels)
    aucs = [m.auc for m in rep.tasks.values() if m.auc is not None]
    return rep, (float(np.mean(aucs)) if aucs else None)


def train_classifier(manifest: DatasetManifest, cfg: ClfTrainConfig = ClfTrainConfig(),
                     augment_cfg: AugmentConfig = AugmentConfig(), out_path=None,
                     log_path=None, segmenter=None,
                     val_manifest: Optional[DatasetManifest] = None) -> dict:
    """Train the multi-task classifier and return the checkpoint payload.

    ``train``/``val`` split tags select the data when present. The batch of
    ``batch_size`` variable-sized ROIs is processed by gradient accumulation.
    With a validation set the checkpoint holds the best mean-AUC weights and
    training stops after ``patience`` epochs without improvement.
    """
    if val_manifest is None and any(e.split for e in manifest):
        val_manifest = manifest.subset("val")
        manifest = manifest.subset("train")
    if len(manifest) == 0:
        raise ValueError("empty training set")
    if not any(e.labels.any for e in manifest):
        raise ValueError("unlabeled training set")
    train = build_cases(manifest, cfg.margin, cfg.model.min_roi_dim, segmenter)
    val = build_cases(val_manifest, cfg.margin, cfg.model.min_roi_dim, segmenter) if val_manifest else []

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = build_classifier(cfg.model, cfg.seed)
    opt = make_optimizer(model, cfg)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    sched = None
    if cfg.cosine:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs * steps_per_epoch)

    records = []
    logf = open(log_path, "w") if log_path else None
    best_score, best_state, stale = -math.inf, None, 0
    step = 0
    try:
        for epoch in range(cfg.epochs):
            model.train()
            order = rng.permutation(len(train))
            epoch_losses = []
            for b in range(0, len(order), cfg.batch_size):
                batch = [train[i] for i in order[b: b + cfg.batch_size]]
                labels = [c.labels for c in batch]
                if not any(l.any for l in labels):
                    continue
                inputs = [augment_sample(c.roi.channels, None, c.present, rng, augment_cfg)[0]
                          for c in batch]
                opt.zero_grad()
                loss, parts = accumulate_batch(model, inputs, labels, cfg.gamma, cfg.alpha)
                opt.step()
                if sched is not None:
                    sched.step()
                rec = {"epoch": epoch, "step": step, "loss": float(loss)}
                rec.update({f"loss_{t}": float(v) for t, v in parts.items()})
                records.append(rec)
                epoch_losses.append(float(loss))
                if logf:
                    logf.write(json.dumps(rec) + "\n")
                step += 1
            erec = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)) if epoch_losses else None}
            if val:
                rep, score = _val_metrics(model, val)
                erec["val_mean_auc"] = score
                erec["val"] = {t: {"auc": m.auc, "accuracy": m.accuracy} for t, m in rep.tasks.items()}
                if score is not None and score > best_score:
                    best_score, stale = score, 0
                    best_state = {k: v.clone() for k, v in model.state_dict().items()}
                else:
                    stale += 1
            records.append(erec)
            if logf:
                logf.write(json.dumps(erec) + "\n")
            log.info("clf epoch %d loss %s", epoch, erec["train_loss"])
            if val and stale >= cfg.patience:
                break
    finally:
        if logf:
            logf.close()

    state = best_state if best_state is not None else model.state_dict()
    config = {"model": model_config_dict(cfg.model), "train": cfg.to_dict(),
              "augment": augment_cfg.to_dict()}
    payload = make_checkpoint("classifier", config, state, records)
    if out_path is not None:
        save_checkpoint(out_path, payload)
    return payload


def step_losses(payload: dict) -> List[float]:
    return [r["loss"] for r in payload["log"] if "step" in r]


def epoch_losses(payload: dict) -> List[float]:
    return [r["train_loss"] for r in payload["log"] if "train_loss" in r]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_split(manifest: DatasetManifest, seg_checkpoint, clf_checkpoint,
                   thresholds=0.5, margin: int = DEFAULT_MARGIN,
                   min_roi_dim: int = MIN_ROI_DIM):
    """Segment, crop and classify every patient, then score each task.

    Returns ``(report, predictions)`` with predictions as
    ``{patient_id: (p_gbm, p_idhmut, p_codel)}``.
    """
    from .pipeline import infer_patient
    from .segmentation import Segmenter

    if len(manifest) == 0:
        raise ValueError("empty split")
    segmenter = Segmenter(seg_checkpoint)
    model = classifier_from_checkpoint(clf_checkpoint)
    preds = {}
    for e in manifest:
        _, _, probs = infer_patient(e.load_study(), segmenter, model, margin, min_roi_dim)
        preds[e.patient_id] = probs
    scores = {t: [preds[e.patient_id][k] for e in manifest] for k, t in enumerate(TASKS)}
    labels = {t: [getattr(e.labels, t) for e in manifest] for t in TASKS}
    return report(scores, labels, thresholds), preds
