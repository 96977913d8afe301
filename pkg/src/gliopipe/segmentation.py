"""Whole-tumor 3D U-Net: model, Dice metric/loss, training and inference."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import AugmentConfig, augment_sample
from .checkpoint import CheckpointError, load_checkpoint, make_checkpoint, save_checkpoint
from .io import DatasetManifest
from .volume import MODALITIES, MRIStudy, SegmentationMask, assemble_channels

log = logging.getLogger(__name__)

DICE_EPS = 1e-5


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 4
    base_filters: int = 16
    depth: int = 4  # number of 2x downsamplings

    def __post_init__(self):
        if self.in_channels != len(MODALITIES):
            raise ValueError(f"in_channels must be {len(MODALITIES)}")
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_filters < 4:
            raise ValueError(f"base_filters must be >= 4, got {self.base_filters}")

    @property
    def divisor(self) -> int:
        return 2 ** self.depth


@dataclass(frozen=True)
class SegTrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 2
    patch_size: Tuple[int, int, int] = (64, 64, 64)
    p_tumor_patch: float = 0.5
    seed: int = 0
    unet: UNetConfig = field(default_factory=UNetConfig)

    def __post_init__(self):
        if isinstance(self.unet, dict):
            object.__setattr__(self, "unet", UNetConfig(**self.unet))
        ps = tuple(int(p) for p in self.patch_size)
        object.__setattr__(self, "patch_size", ps)
        if len(ps) != 3 or any(p % self.unet.divisor for p in ps):
            raise ValueError(f"patch_size {ps} must be divisible by {self.unet.divisor}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, stride=stride, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.ReLU(inplace=True),
        nn.Conv3d(cout, cout, 3, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


class UNet3D(nn.Module):
    """Encoder-decoder with skip connections; strided convs down, transposed convs up.

    ``forward`` returns voxelwise probabilities; ``logits`` the raw scores.
    Inputs of any size are zero-padded up to a multiple of ``2**depth`` and
    the output is cropped back.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_filters * 2 ** i for i in range(cfg.depth + 1)]
        self.encoders = nn.ModuleList([conv_block(cfg.in_channels, widths[0])])
        for i in range(1, cfg.depth + 1):
            self.encoders.append(conv_block(widths[i - 1], widths[i], stride=2))
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in range(cfg.depth, 0, -1):
            self.ups.append(nn.ConvTranspose3d(widths[i], widths[i - 1], 2, stride=2))
            self.decoders.append(conv_block(2 * widths[i - 1], widths[i - 1]))
        self.head = nn.Conv3d(widths[0], 1, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        size = x.shape[2:]
        x = F.pad(x, pad_amounts(size, self.cfg.divisor))
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
        x = skips.pop()
        for up, dec in zip(self.ups, self.decoders):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        out = self.head(x)
        return out[:, :, : size[0], : size[1], : size[2]]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))


def padded_size(n: int, divisor: int) -> int:
    return int(math.ceil(n / divisor) * divisor)


def pad_amounts(size, divisor: int) -> List[int]:
    """``F.pad`` argument padding the trailing end of each spatial axis."""
    pads = []
    for n in reversed(tuple(size)):
        pads += [0, padded_size(int(n), divisor) - int(n)]
    return pads


def build_unet(cfg: UNetConfig = UNetConfig(), seed: int = 0) -> UNet3D:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UNet3D(cfg)


# ---------------------------------------------------------------------------
# metric and loss
# ---------------------------------------------------------------------------

def dice_score(pred, ref) -> float:
    """``2|A n B| / (|A| + |B|)``; two empty masks score 1.0."""
    a = np.asarray(pred.data if isinstance(pred, SegmentationMask) else pred).astype(bool)
    b = np.asarray(ref.data if isinstance(ref, SegmentationMask) else ref).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask dims differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def soft_dice_loss(probs: torch.Tensor, ref: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    ref = ref.to(probs.dtype)
    inter = (probs * ref).sum()
    return 1.0 - (2.0 * inter + eps) / (probs.sum() + ref.sum() + eps)


def seg_loss(logits: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Soft Dice on probabilities plus BCE on logits."""
    ref = ref.to(logits.dtype)
    return soft_dice_loss(torch.sigmoid(logits), ref) + F.binary_cross_entropy_with_logits(logits, ref)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _sample_patch(x: np.ndarray, mask: np.ndarray, patch, rng: np.random.Generator,
                  p_tumor: float):
    pads = [(0, 0)] + [(0, max(0, p - n)) for p, n in zip(patch, x.shape[1:])]
    if any(p[1] for p in pads):
        x = np.pad(x, pads)
        mask = np.pad(mask, pads[1:])
    dims = mask.shape
    fg = np.argwhere(mask)
    if len(fg) and rng.random() < p_tumor:
        centre = fg[rng.integers(len(fg))]
        lo = [int(np.clip(c - p // 2, 0, n - p)) for c, p, n in zip(centre, patch, dims)]
    else:
        lo = [int(rng.integers(0, n - p + 1)) for p, n in zip(patch, dims)]
    sl = tuple(slice(l, l + p) for l, p in zip(lo, patch))
    return x[(slice(None),) + sl], mask[sl]


def _load_training_cases(manifest: DatasetManifest):
    cases = []
    for e in manifest:
        if e.mask is None:
            raise ValueError(f"{e.patient_id}: segmentation training needs a mask")
        study = e.load_study()
        cases.append((study, e.load_mask()))
    return cases


def train_segmenter(manifest: DatasetManifest, cfg: SegTrainConfig = SegTrainConfig(),
                    augment_cfg: AugmentConfig = AugmentConfig(), out_path=None,
                    val_manifest: Optional[DatasetManifest] = None) -> dict:
    """Train the U-Net; returns the checkpoint payload (also written to ``out_path``).

    If the manifest carries split tags, ``train`` rows are used for fitting
    and ``val`` rows for per-epoch Dice; otherwise every row trains.
    """
    if len(manifest) == 0:
        raise ValueError("empty manifest")
    if val_manifest is None and any(e.split for e in manifest):
        val_manifest = manifest.subset("val")
        manifest = manifest.subset("train")
        if len(manifest) == 0:
            raise ValueError("manifest has no train rows")
    train = _load_training_cases(manifest)
    val = _load_training_cases(val_manifest) if val_manifest is not None else []

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = build_unet(cfg.unet, cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)

    volumes = [(assemble_channels(s), m.data, s.present, s.spacing) for s, m in train]
    history = []
    best = (-1.0, None)
    for epoch in range(cfg.epochs):
        t0 = time.time()
        model.train()
        order = rng.permutation(len(volumes))
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            xs, ys = [], []
            for i in order[b: b + cfg.batch_size]:
                x, m, present, spacing = volumes[i]
                xp, mp = _sample_patch(x, m, cfg.patch_size, rng, cfg.p_tumor_patch)
                xp, mp = augment_sample(xp, mp, present, rng, augment_cfg, spacing)
                xs.append(xp)
                ys.append(mp)
            xb = torch.from_numpy(np.stack(xs))
            yb = torch.from_numpy(np.stack(ys)[:, None].astype(np.float32))
            opt.zero_grad()
            loss = seg_loss(model.logits(xb), yb)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "seconds": time.time() - t0}
        if val:
            model.eval()
            dices = [dice_score(_segment_with(model, cfg, s), m) for s, m in val]
            rec["val_dice"] = float(np.mean(dices))
            if rec["val_dice"] > best[0]:
                best = (rec["val_dice"], {k: v.clone() for k, v in model.state_dict().items()})
        history.append(rec)
        log.info("seg epoch %d loss %.4f%s", epoch, rec["train_loss"],
                 f" val_dice {rec['val_dice']:.4f}" if val else "")

    state = best[1] if best[1] is not None else model.state_dict()
    config = {"train": _cfg_dict(cfg), "augment": augment_cfg.to_dict()}
    payload = make_checkpoint("segmenter", config, state, history)
    if out_path is not None:
        save_checkpoint(out_path, payload)
    return payload


def _cfg_dict(cfg: SegTrainConfig) -> dict:
    d = asdict(cfg)
    d["patch_size"] = list(cfg.patch_size)
    return d


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def load_segmenter(checkpoint) -> Tuple[UNet3D, SegTrainConfig]:
    payload = load_checkpoint(checkpoint, "segmenter")
    try:
        cfg = SegTrainConfig(**payload["config"]["train"])
        model = UNet3D(cfg.unet)
        model.load_state_dict(payload["state_dict"])
    except Exception as exc:
        raise CheckpointError(f"segmenter checkpoint does not match its config: {exc}") from None
    model.eval()
    return model, cfg


def _window_starts(n: int, w: int) -> List[int]:
    if n <= w:
        return [0]
    stride = max(1, w // 2)
    starts = list(range(0, n - w + 1, stride))
    if starts[-1] != n - w:
        starts.append(n - w)
    return starts


@torch.no_grad()
def predict_probabilities(model: UNet3D, x: np.ndarray, patch) -> np.ndarray:
    """Sliding-window (50% overlap, uniform average) voxel probabilities."""
    dims = x.shape[1:]
    win = [min(p, n) for p, n in zip(patch, dims)]
    if all(w == n for w, n in zip(win, dims)):
        return model(torch.from_numpy(x[None]))[0, 0].numpy()
    acc = np.zeros(dims, dtype=np.float64)
    count = np.zeros(dims, dtype=np.float64)
    starts = [_window_starts(n, w) for n, w in zip(dims, win)]
    for i in starts[0]:
        for j in starts[1]:
            for k in starts[2]:
                sl = (slice(i, i + win[0]), slice(j, j + win[1]), slice(k, k + win[2]))
                p = model(torch.from_numpy(np.ascontiguousarray(x[(slice(None),) + sl])[None]))
                acc[sl] += p[0, 0].numpy()
                count[sl] += 1.0
    return (acc / count).astype(np.float32)


def _segment_with(model: UNet3D, cfg: SegTrainConfig, study: MRIStudy,
                  threshold: float = 0.5) -> SegmentationMask:
    probs = predict_probabilities(model, assemble_channels(study), cfg.patch_size)
    probs = np.nan_to_num(probs, nan=0.0)
    return SegmentationMask((probs >= threshold).astype(np.uint8), study.spacing)


def segment(study: MRIStudy, checkpoint, threshold: float = 0.5) -> SegmentationMask:
    """Binary whole-tumor mask for a preprocessed study."""
    model, cfg = load_segmenter(checkpoint)
    return _segment_with(model, cfg, study, threshold)


class Segmenter:
    """Loaded segmenter for repeated inference; read-only after construction."""

    def __init__(self, checkpoint):
        self.model, self.cfg = load_segmenter(checkpoint)

    def __call__(self, study: MRIStudy, threshold: float = 0.5) -> SegmentationMask:
        return _segment_with(self.model, self.cfg, study, threshold)


def segment_many(studies: Iterable[MRIStudy], checkpoint, threshold: float = 0.5):
    seg = Segmenter(checkpoint)
    return [seg(s, threshold) for s in studies]
