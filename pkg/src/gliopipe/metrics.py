"""Diagnostic metrics: AUC, confusion counts, threshold sweeps and per-task reports."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .volume import TASKS

REPORT_VERSION = 1
PAIRWISE_MAX_N = 10_000
TASK_TITLES = {"grade": "GBM vs. LGG", "idh": "IDH status", "codel": "1p19q co-deletion"}


def _as_binary(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{len(s)} scores but {len(y)} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(int)


def auc_pairwise(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ranked correctly; ties count half."""
    s, y = _as_binary(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("undefined AUC: labels contain a single class")
    diff = pos[:, None] - neg[None, :]
    twice = 2 * int((diff > 0).sum()) + int((diff == 0).sum())
    return twice / (2 * len(pos) * len(neg))


def auc_rank(scores, labels) -> float:
    """Mann-Whitney AUC from mid-ranks, O(n log n)."""
    s, y = _as_binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("undefined AUC: labels contain a single class")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # doubled mid-ranks keep everything in integers
    twice_rank = np.empty(len(s), dtype=np.int64)
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    for a, b in zip(starts, ends):
        twice_rank[order[a:b]] = a + b + 1  # 2 * mean of ranks a+1 .. b
    twice_u = int(twice_rank[y == 1].sum()) - n_pos * (n_pos + 1)
    return twice_u / (2 * n_pos * n_neg)


def auc(scores, labels) -> float:
    s, _ = _as_binary(scores, labels)
    return auc_pairwise(scores, labels) if len(s) <= PAIRWISE_MAX_N else auc_rank(scores, labels)


def confusion_at(scores, labels, threshold: float) -> Tuple[int, int, int, int]:
    """``(TP, FP, TN, FN)`` with a positive call when ``score >= threshold``."""
    s, y = _as_binary(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    return tp, fp, tn, fn


def _ratio(a: int, b: int) -> Optional[float]:
    return a / b if b else None


@dataclass(frozen=True)
class TaskMetrics:
    n: int
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    auc: Optional[float]
    accuracy: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]

    def __post_init__(self):
        if self.tp + self.fp + self.tn + self.fn != self.n:
            raise AssertionError("confusion counts do not sum to n")
        if self.accuracy != _ratio(self.tp + self.tn, self.n):
            raise AssertionError("accuracy inconsistent with confusion counts")
        if self.sensitivity != _ratio(self.tp, self.tp + self.fn):
            raise AssertionError("sensitivity inconsistent with confusion counts")
        if self.specificity != _ratio(self.tn, self.tn + self.fp):
            raise AssertionError("specificity inconsistent with confusion counts")

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp

    @classmethod
    def from_scores(cls, scores, labels, threshold: float = 0.5, task: str = "") -> "TaskMetrics":
        s, y = _as_binary(scores, labels)
        tp, fp, tn, fn = confusion_at(s, y, threshold)
        try:
            a = auc(s, y)
        except ValueError:
            if len(y):
                warnings.warn(f"AUC undefined for task {task or '?'}: single-class labels")
            a = None
        return cls(
            n=len(y), threshold=float(threshold), tp=tp, fp=fp, tn=tn, fn=fn, auc=a,
            accuracy=_ratio(tp + tn, len(y)),
            sensitivity=_ratio(tp, tp + fn),
            specificity=_ratio(tn, tn + fp),
        )


@dataclass(frozen=True)
class MetricsReport:
    tasks: Dict[str, TaskMetrics] = field(default_factory=dict)

    def to_dict(self, **meta) -> dict:
        d = {"format_version": REPORT_VERSION}
        d.update(meta)
        d["tasks"] = {name: asdict(m) for name, m in self.tasks.items()}
        return d

    def to_json(self, **meta) -> str:
        return json.dumps(self.to_dict(**meta), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        if d.get("format_version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('format_version')}")
        return cls({name: TaskMetrics(**m) for name, m in d["tasks"].items()})

    def table(self) -> str:
        """Plain-text table with percentages to one decimal."""

        def pct(v):
            return "  n/a" if v is None else f"{100 * v:5.1f}"

        rows = [f"{'Task':<20}{'AUC':>7}{'Acc.':>7}{'Sens.':>7}{'Spec.':>7}{'n':>6}{'thr':>6}"]
        for name, m in self.tasks.items():
            rows.append(
                f"{TASK_TITLES.get(name, name):<20}{pct(m.auc):>7}{pct(m.accuracy):>7}"
                f"{pct(m.sensitivity):>7}{pct(m.specificity):>7}{m.n:>6}{m.threshold:>6.2f}"
            )
        return "\n".join(rows) + "\n"


def _known(scores, labels):
    s = np.asarray(scores, dtype=float).ravel()
    y = np.array([np.nan if v is None else v for v in labels], dtype=float).ravel()
    keep = ~np.isnan(y)
    return s[keep], y[keep].astype(int)


def report(scores: Mapping[str, Sequence[float]], labels: Mapping[str, Sequence],
           thresholds=0.5) -> MetricsReport:
    """Per-task metrics; samples whose label is ``None``/NaN are dropped per task.

    ``thresholds`` is a single value or a mapping task -> threshold.
    """
    out = {}
    for name in TASKS:
        if name not in scores:
            continue
        thr = thresholds.get(name, 0.5) if isinstance(thresholds, Mapping) else thresholds
        s, y = _known(scores[name], labels[name])
        out[name] = TaskMetrics.from_scores(s, y, float(thr), name)
    return MetricsReport(out)


def threshold_sweep(scores, labels, grid) -> List[Tuple[float, Optional[float], Optional[float], Optional[float]]]:
    """``(threshold, sensitivity, specificity, accuracy)`` for each grid point."""
    grid = list(grid)
    if not grid:
        raise ValueError("empty threshold grid")
    s, y = _as_binary(scores, labels)
    rows = []
    for t in grid:
        tp, fp, tn, fn = confusion_at(s, y, t)
        rows.append((float(t), _ratio(tp, tp + fn), _ratio(tn, tn + fp), _ratio(tp + tn, len(y))))
    return rows
