"""Multi-task 3D classifier and the masked focal loss it is trained with."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import CheckpointError, load_checkpoint
from .roi import MIN_ROI_DIM, TumorROI
from .volume import MODALITIES, TASKS, LabelTriple


@dataclass(frozen=True)
class ClassifierConfig:
    in_channels: int = 4
    widths: Tuple[int, ...] = (32, 64, 128, 256)
    residual: bool = True
    min_roi_dim: int = MIN_ROI_DIM

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if self.in_channels != len(MODALITIES):
            raise ValueError(f"in_channels must be {len(MODALITIES)}")
        if len(widths) < 2:
            raise ValueError("classifier needs at least 2 blocks")
        if any(w <= 0 for w in widths) or any(b < a for a, b in zip(widths, widths[1:])):
            raise ValueError(f"widths must be positive and nondecreasing, got {widths}")
        if self.min_roi_dim < 2 ** (len(widths) - 1):
            raise ValueError("min_roi_dim too small for the number of downsamplings")


def conv_in_relu(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, stride=stride, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


class Block(nn.Module):
    def __init__(self, width: int, residual: bool):
        super().__init__()
        self.body = nn.Sequential(conv_in_relu(width, width), conv_in_relu(width, width))
        self.residual = residual

    def forward(self, x):
        y = self.body(x)
        return x + y if self.residual else y


class MultiTaskClassifier(nn.Module):
    """Shared conv trunk, adaptive average pooling, one logit head per task.

    ``forward`` maps ``(B, 4, X, Y, Z)`` to ``(B, 3)`` logits ordered
    (grade, idh, codel); any spatial size >= ``min_roi_dim`` is accepted.
    """

    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        layers: List[nn.Module] = [conv_in_relu(cfg.in_channels, w[0]), Block(w[0], cfg.residual)]
        for a, b in zip(w, w[1:]):
            layers += [conv_in_relu(a, b, stride=2), Block(b, cfg.residual)]
        self.trunk = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.heads = nn.ModuleList([nn.Linear(w[-1], 1) for _ in TASKS])

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5:
            raise ValueError(f"expected (B, C, X, Y, Z) input, got shape {tuple(x.shape)}")
        if min(x.shape[2:]) < self.cfg.min_roi_dim:
            raise ValueError(
                f"ROI {tuple(x.shape[2:])} smaller than min_roi_dim {self.cfg.min_roi_dim}"
            )
        return self.pool(self.trunk(x)).flatten(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.features(x)
        return torch.cat([h(f) for h in self.heads], dim=1)


def build_classifier(cfg: ClassifierConfig = ClassifierConfig(), seed: int = 0) -> MultiTaskClassifier:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MultiTaskClassifier(cfg)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def focal_bce_with_logits(logits: torch.Tensor, targets: torch.Tensor,
                          gamma: float = 2.0, alpha: float = 0.5) -> torch.Tensor:
    """Elementwise focal BCE from logits.

    ``-a y (1-p)^g log p - (1-a)(1-y) p^g log(1-p)`` with the log terms and
    powers taken through softplus so large |logit| stays finite.
    """
    log_p = -F.softplus(-logits)
    log_q = -F.softplus(logits)
    pos = alpha * targets * torch.exp(gamma * log_q) * log_p
    neg = (1.0 - alpha) * (1.0 - targets) * torch.exp(gamma * log_p) * log_q
    return -(pos + neg)


def labels_to_tensor(labels, dtype=torch.float64) -> torch.Tensor:
    """(B, 3) float tensor with NaN for missing labels."""
    if isinstance(labels, torch.Tensor):
        return labels.to(dtype)
    if len(labels) and isinstance(labels[0], LabelTriple):
        arr = np.stack([l.as_array() for l in labels])
    else:
        arr = np.asarray(labels, dtype=float).reshape(-1, len(TASKS))
    return torch.as_tensor(arr, dtype=dtype)


def masked_multitask_loss(logits: torch.Tensor, labels, gamma: float = 2.0,
                          alpha: float = 0.5, return_tasks: bool = False):
    """Mean over tasks of the focal loss averaged over that task's labeled samples.

    Tasks without any label in the batch are left out of the mean. Per-task
    sums run over sorted terms so the result does not depend on batch order.
    """
    y = labels_to_tensor(labels, logits.dtype)
    if y.shape != logits.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(y.shape)} differ")
    per_task = {}
    for t, name in enumerate(TASKS):
        known = ~torch.isnan(y[:, t])
        n = int(known.sum())
        if n == 0:
            continue
        terms = focal_bce_with_logits(logits[known, t], y[known, t], gamma, alpha)
        per_task[name] = torch.sort(terms).values.sum() / n
    if not per_task:
        raise ValueError("unlabeled batch")
    total = sum(per_task.values()) / len(per_task)
    return (total, per_task) if return_tasks else total


def batch_task_weights(labels) -> torch.Tensor:
    """Per-(sample, task) weights making a weighted sum equal the masked loss.

    ``w[i, t] = 1 / (n_t * T)`` for labeled entries, where ``n_t`` counts the
    labels for task ``t`` and ``T`` the tasks with any label; else 0.
    """
    y = labels_to_tensor(labels)
    known = ~torch.isnan(y)
    counts = known.sum(dim=0)
    active = int((counts > 0).sum())
    if active == 0:
        raise ValueError("unlabeled batch")
    w = known.to(torch.float64) / (counts.clamp(min=1).to(torch.float64) * active)
    return w


def weighted_sample_loss(logits: torch.Tensor, labels, weights: torch.Tensor,
                         gamma: float = 2.0, alpha: float = 0.5) -> torch.Tensor:
    """Weighted focal loss for a subset of samples (missing labels carry weight 0)."""
    y = labels_to_tensor(labels, logits.dtype)
    known = ~torch.isnan(y)
    terms = focal_bce_with_logits(logits, torch.where(known, y, torch.zeros_like(y)), gamma, alpha)
    return (terms * weights.to(logits.dtype)).sum()


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def classifier_from_checkpoint(checkpoint) -> MultiTaskClassifier:
    payload = load_checkpoint(checkpoint, "classifier")
    try:
        cfg = ClassifierConfig(**payload["config"]["model"])
        model = MultiTaskClassifier(cfg)
        model.load_state_dict(payload["state_dict"])
    except Exception as exc:
        raise CheckpointError(f"classifier checkpoint does not match its config: {exc}") from None
    model.eval()
    return model


@torch.no_grad()
def predict_with(model: MultiTaskClassifier, roi: TumorROI) -> Tuple[float, float, float]:
    x = torch.from_numpy(np.ascontiguousarray(roi.channels, dtype=np.float32))[None]
    p = torch.sigmoid(model(x))[0]
    return tuple(float(v) for v in p)


def predict_probs(roi: TumorROI, checkpoint) -> Tuple[float, float, float]:
    """``(p_gbm, p_idhmut, p_codel)`` for one ROI."""
    return predict_with(classifier_from_checkpoint(checkpoint), roi)


def model_config_dict(cfg: ClassifierConfig) -> dict:
    d = asdict(cfg)
    d["widths"] = list(cfg.widths)
    return d
