"""Versioned checkpoint container shared by the segmenter and the classifier."""

from __future__ import annotations

import io
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch

FORMAT = "gliopipe-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def make_checkpoint(kind: str, config: Dict[str, Any], state_dict: Dict[str, torch.Tensor],
                    log=None, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "state_dict": {k: v.detach().cpu().clone() for k, v in state_dict.items()},
        "log": list(log or []),
        "extra": dict(extra or {}),
    }


def save_checkpoint(path: Union[str, Path], payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(source, kind: Optional[str] = None) -> Dict[str, Any]:
    """Load and check a checkpoint from a path (or pass through a loaded dict)."""
    if isinstance(source, dict):
        payload = source
    else:
        path = Path(source)
        if not path.exists():
            raise CheckpointError(f"{path}: checkpoint not found")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:  # torch raises a variety of unpickling errors
            raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError("not a gliopipe checkpoint")
    if payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('format_version')}")
    if kind is not None and payload.get("kind") != kind:
        raise CheckpointError(f"expected a {kind} checkpoint, got {payload.get('kind')}")
    for key in ("config", "state_dict"):
        if not isinstance(payload.get(key), dict):
            raise CheckpointError(f"checkpoint is missing {key!r}")
    return payload
