"""Acceptance criteria, one test per criterion.

Each test records its outcome in ``ACCEPTANCE`` and prints a PASS/FAIL line;
the terminal summary repeats all of them.
"""

import json
import math

import numpy as np
import pytest
import torch

from gliopipe.augment import AugmentConfig, augment_sample
from gliopipe.classifier import (
    build_classifier,
    focal_bce_with_logits,
    masked_multitask_loss,
)
from gliopipe.cli import main
from gliopipe.io import load_mask, read_manifest
from gliopipe.metrics import auc, confusion_at, threshold_sweep
from gliopipe.pipeline import read_predictions, run_pipeline
from gliopipe.preprocess import resample_isotropic
from gliopipe.segmentation import Segmenter, dice_score, soft_dice_loss
from gliopipe.trainer import SplitSpec, make_splits
from gliopipe.volume import MODALITIES, TASKS, Volume

from .conftest import ACCEPTANCE
from .test_classifier import central_diff, focal_scalar, loop_loss, random_batch
from .test_metrics import mann_whitney
from .test_segmentation import count_dice
from .test_trainer import synthetic_manifest
from .test_volume import LEGAL_SUBSETS


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_criterion_01_masked_loss_oracle():
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        z, y = random_batch(rng, b=8, p_missing=float(rng.uniform(0, 0.6)))
        got = float(masked_multitask_loss(torch.from_numpy(z), y))
        worst = max(worst, abs(got - loop_loss(z.tolist(), y.tolist())))
    # a task with no labels leaves the mean exactly
    excluded_ok = True
    for t in range(3):
        z, y = random_batch(rng, b=8, p_missing=0.2)
        y[:, t] = np.nan
        y[0, (t + 1) % 3] = 1.0
        total, parts = masked_multitask_loss(torch.from_numpy(z), y, return_tasks=True)
        others = [parts[TASKS[k]] for k in range(3) if k != t]
        excluded_ok &= TASKS[t] not in parts and float(total) == float(sum(others) / 2)
    record(1, worst < 1e-6 and excluded_ok,
           f"max |loss - loop oracle| = {worst:.2e} over 100 batches; empty-task exclusion exact: {excluded_ok}")


def test_criterion_02_focal_reduces_to_bce():
    rng = np.random.default_rng(102)
    z = torch.from_numpy(rng.normal(0, 4, 1000))
    y = torch.from_numpy(rng.integers(0, 2, 1000).astype(float))
    bce = torch.nn.functional.binary_cross_entropy_with_logits(z, y, reduction="none")
    worst = float((focal_bce_with_logits(z, y, 0.0, 0.5) - 0.5 * bce).abs().max())
    hand = float(focal_bce_with_logits(torch.tensor(0.0, dtype=torch.float64),
                                       torch.tensor(1.0, dtype=torch.float64), 2.0, 1.0))
    hand_err = abs(hand - 0.25 * math.log(2))
    record(2, worst < 1e-9 and hand_err < 1e-9 and abs(hand - focal_scalar(0.0, 1, 2.0, 1.0)) < 1e-12,
           f"max |focal(g=0) - BCE/2| = {worst:.2e}; hand value {hand:.6f} (error {hand_err:.1e})")


def test_criterion_03_gradients_match_finite_differences():
    rng = np.random.default_rng(103)
    worst_loss = 0.0
    for _ in range(20):
        z, y = random_batch(rng, b=int(rng.integers(2, 9)), scale=2.0)
        zt = torch.from_numpy(z).requires_grad_()
        masked_multitask_loss(zt, y).backward()
        fd = central_diff(lambda q: masked_multitask_loss(q, y), zt.detach().clone())
        worst_loss = max(worst_loss, float((zt.grad - fd).norm() / fd.norm()))
    worst_dice = 0.0
    for _ in range(20):
        shape = tuple(int(v) for v in rng.integers(2, 5, 3))
        p = torch.from_numpy(rng.uniform(0.01, 0.99, shape)).requires_grad_()
        t = torch.from_numpy((rng.random(shape) > 0.5).astype(float))
        soft_dice_loss(p, t).backward()
        fd = central_diff(lambda q: soft_dice_loss(q, t), p.detach().clone())
        worst_dice = max(worst_dice, float((p.grad - fd).norm() / fd.norm()))
    record(3, worst_loss < 1e-4 and worst_dice < 1e-4,
           f"max relative gradient error: masked loss {worst_loss:.2e}, soft Dice {worst_dice:.2e}")


def test_criterion_04_dice_matches_counting():
    rng = np.random.default_rng(104)
    pairs = [(np.zeros((4, 5, 6), np.uint8), np.zeros((4, 5, 6), np.uint8))]
    a = np.zeros((4, 5, 6), np.uint8)
    a[:2] = 1
    pairs.append((a, 1 - a))
    while len(pairs) < 100:
        shape = tuple(int(v) for v in rng.integers(2, 8, 3))
        pa, pb = rng.uniform(0, 0.6, 2)
        pairs.append(((rng.random(shape) < pa).astype(np.uint8), (rng.random(shape) < pb).astype(np.uint8)))
    mismatches = sum(dice_score(x, y) != count_dice(x, y) for x, y in pairs)
    edge_ok = dice_score(*pairs[0]) == 1.0 and dice_score(*pairs[1]) == 0.0
    record(4, mismatches == 0 and edge_ok,
           f"{mismatches} mismatches over {len(pairs)} pairs; both-empty = 1.0 and disjoint = 0.0: {edge_ok}")


def test_criterion_05_auc_matches_mann_whitney():
    rng = np.random.default_rng(105)
    worst, invariant = 0.0, True
    for _ in range(200):
        n = int(rng.integers(2, 51))
        s = np.round(rng.random(n), 1)
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        a = auc(s, y)
        worst = max(worst, abs(a - mann_whitney(s.tolist(), y.tolist())))
        invariant &= auc(np.exp(3 * s) - 7, y) == a and auc(s ** 3, y) == a
    record(5, worst < 1e-9 and invariant,
           f"max |AUC - pair counting| = {worst:.1e} over 200 tied sets; monotone invariance exact: {invariant}")


def test_criterion_06_dropout_constraint():
    rng = np.random.default_rng(106)
    cfg = AugmentConfig(p_channel_drop=0.5, p_elastic=0.0)
    base = rng.uniform(0.5, 1.5, (4, 8, 8, 8)).astype(np.float32)
    lost_t1ce = lost_both = 0
    draws = 0
    for k in range(10_000):
        present = LEGAL_SUBSETS[k % len(LEGAL_SUBSETS)]
        x = base.copy()
        for c, m in enumerate(MODALITIES):
            if m not in present:
                x[c] = 0
        y, _ = augment_sample(x, None, present, rng, cfg)
        lost_t1ce += not y[1].any()
        lost_both += not (y[2].any() or y[3].any())
        draws += 1
    record(6, lost_t1ce == 0 and lost_both == 0,
           f"{draws} draws over {len(LEGAL_SUBSETS)} subsets: T1ce zeroed {lost_t1ce}, T2+FLAIR zeroed {lost_both}")


def test_criterion_07_adaptive_pool_sizes():
    rng = np.random.default_rng(107)
    model = build_classifier().eval()
    sizes = [(16, 16, 16), (64, 48, 56)]
    while len(sizes) < 10:
        sizes.append((int(rng.integers(16, 65)), int(rng.integers(16, 49)), int(rng.integers(16, 57))))
    shapes = set()
    with torch.no_grad():
        for s in sizes:
            out = model(torch.from_numpy(rng.normal(size=(1, 4) + s).astype(np.float32)))
            shapes.add(tuple(out.shape))
            assert torch.isfinite(out).all()
    record(7, shapes == {(1, 3)}, f"{len(sizes)} ROI sizes from 16^3 to 64x48x56 -> output shapes {sorted(shapes)}")


@pytest.mark.slow
def test_criterion_08_desk_learning(desk):
    test_ids = {e.patient_id for e in desk.pre if e.split == "test"}
    seg = Segmenter(desk.seg_path)
    dices = [dice_score(seg(e.load_study()).data, load_mask(e.mask).data)
             for e in desk.pre if e.patient_id in test_ids]
    metrics = json.loads((desk.run / "metrics.json").read_text())
    grade_auc = metrics["tasks"]["grade"]["auc"]
    n_train = sum(e.split == "train" for e in desk.pre)
    mean_dice = float(np.mean(dices))
    within = desk.seg_seconds < 1200 and desk.clf_seconds < 1200
    record(8, len(dices) == 8 and mean_dice >= 0.80 and grade_auc >= 0.90 and within,
           f"train {n_train} / held out {len(dices)}: Dice {mean_dice:.3f} (min {min(dices):.3f}), "
           f"grade AUC {grade_auc:.3f}; training {desk.seg_seconds:.0f} s + {desk.clf_seconds:.0f} s")


@pytest.mark.slow
def test_criterion_09_run_outputs_and_determinism(desk):
    run = desk.run
    before = {name: (run / name).read_bytes() for name in ("predictions.csv", "metrics.json", "metrics.txt")}
    rows = before["predictions.csv"].decode().splitlines()
    metrics = json.loads(before["metrics.json"])
    fields = [(t, k) for t in TASKS for k in ("auc", "accuracy", "sensitivity", "specificity")
              if metrics["tasks"].get(t, {}).get(k) is not None]
    header_ok = rows[0] == "patient_id,p_gbm,p_idhmut,p_codel"
    one_per_patient = sorted(r.split(",")[0] for r in rows[1:]) == sorted(e.patient_id for e in desk.cohort)

    _, failures = run_pipeline(desk.cfg)
    same = all((run / name).read_bytes() == data for name, data in before.items())
    record(9, header_ok and one_per_patient and len(fields) == 12 and not failures and not desk.failures and same,
           f"{len(rows) - 1} prediction rows for {len(desk.cohort)} patients, {len(fields)}/12 metric fields; "
           f"rerun byte-identical: {same}")


@pytest.mark.slow
def test_criterion_10_threshold_behaviour(desk, tmp_path):
    out = tmp_path / "eval.json"
    code = main(["evaluate", "--predictions", str(desk.run / "predictions.csv"),
                 "--labels", str(desk.root / "cohort" / "manifest.csv"),
                 "--threshold", "0.45", "--sweep", "--out", str(out)])
    rep = json.loads(out.read_text())
    preds = read_predictions(desk.run / "predictions.csv")
    by_id = read_manifest(desk.root / "cohort" / "manifest.csv").by_id()
    agree = monotone = True
    for k, t in enumerate(TASKS):
        pairs = [(preds[p][k], getattr(by_id[p].labels, t)) for p in preds]
        s, y = zip(*[(a, b) for a, b in pairs if b is not None])
        m = rep["tasks"][t]
        tp, fp, tn, fn = confusion_at(s, y, 0.45)
        agree &= (m["tp"], m["fp"], m["tn"], m["fn"]) == (tp, fp, tn, fn)
        agree &= m["sensitivity"] == tp / (tp + fn) and m["specificity"] == tn / (tn + fp)
        agree &= m["accuracy"] == (tp + tn) / len(y)
        sweep = threshold_sweep(s, y, np.linspace(0, 1, 101))
        sens, spec = [r[1] for r in sweep], [r[2] for r in sweep]
        monotone &= all(a >= b for a, b in zip(sens, sens[1:])) and all(a <= b for a, b in zip(spec, spec[1:]))
    record(10, code == 0 and agree and monotone,
           f"evaluate --threshold 0.45 agrees with confusion_at: {agree}; 101-point sweep monotone: {monotone}")


def test_criterion_11_resampling():
    v = resample_isotropic(Volume(np.ones((64, 64, 64), np.float32), (2.0, 2.0, 2.0)))
    dims_ok = v.dims == (128, 128, 128) and v.spacing == (1.0, 1.0, 1.0)
    rng = np.random.default_rng(111)
    ready = Volume(rng.normal(size=(13, 11, 9)).astype(np.float32))
    passthrough = np.array_equal(resample_isotropic(ready).data, ready.data)
    extent_ok, tried = True, 0
    while tried < 50:
        dims = tuple(int(n) for n in rng.integers(2, 40, 3))
        spacing = tuple(float(s) for s in rng.uniform(0.3, 3.0, 3))
        out = resample_isotropic(Volume(np.zeros(dims, np.float32), spacing))
        extent_ok &= all(abs(m * 1.0 - n * s) <= 1.0 for n, s, m in zip(dims, spacing, out.dims))
        tried += 1
    record(11, dims_ok and passthrough and extent_ok,
           f"64^3@2mm -> {v.dims}@{v.spacing}; pass-through bit-identical: {passthrough}; "
           f"extent within one voxel on {tried} cases: {extent_ok}")


def test_criterion_12_split_construction():
    m = make_splits(synthetic_manifest(628, seed=12), SplitSpec(counts=(458, 70, 100), seed=12))
    parts = {s: {e.patient_id for e in m if e.split == s} for s in ("train", "val", "test")}
    counts = tuple(len(parts[s]) for s in ("train", "val", "test"))
    disjoint = not (parts["train"] & parts["val"] or parts["train"] & parts["test"] or parts["val"] & parts["test"])
    covered = set().union(*parts.values()) == {e.patient_id for e in m}
    labeled = all(e.labels.complete for e in m if e.split in ("val", "test"))
    record(12, counts == (458, 70, 100) and disjoint and covered and labeled,
           f"counts {counts}, disjoint {disjoint}, all val/test fully labeled {labeled}")
