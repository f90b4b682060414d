"""Versioned, self-describing checkpoint container (a ``torch.save``'d dict)."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any, Optional

import torch
import torch.nn as nn

from .features import FeatureExtractor
from .memory import PixelQueue
from .models import ConvClassifier, UNet, build_model

FORMAT = "reldistill-checkpoint"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def config_hash(config: Any) -> str:
    if dataclasses.is_dataclass(config):
        config = dataclasses.asdict(config)
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _kind(model: nn.Module) -> str:
    if isinstance(model, UNet):
        return "unet"
    if isinstance(model, ConvClassifier):
        return "classifier"
    raise CheckpointError(f"cannot checkpoint model of type {type(model).__name__}")


def save_checkpoint(path, model: nn.Module, *, ema: Optional[nn.Module] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None,
                    queue: Optional[PixelQueue] = None, config: Any = None,
                    rng_state: Optional[dict] = None, meta: Optional[dict] = None) -> Path:
    if isinstance(model, FeatureExtractor):
        model = model.classifier
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": _kind(model),
        "spec": model.spec,
        "weights": model.state_dict(),
        "ema_weights": None if ema is None else ema.state_dict(),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "queue": None if queue is None else queue.state_dict(),
        "config": dataclasses.asdict(config) if dataclasses.is_dataclass(config) else config,
        "config_hash": None if config is None else config_hash(config),
        "rng_state": rng_state,
        "meta": meta or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if payload["version"] > VERSION:
        raise CheckpointError(f"{path} has version {payload['version']}, newest supported is {VERSION}")
    return payload


def load_model(path, use_ema: bool = True) -> nn.Module:
    """Rebuild the stored network; EMA weights are preferred when present."""
    payload = load_checkpoint(path)
    model = build_model(payload["kind"], payload["spec"])
    weights = payload["ema_weights"] if use_ema and payload["ema_weights"] is not None else payload["weights"]
    model.load_state_dict(weights)
    model.eval()
    return model


def load_extractor(path) -> FeatureExtractor:
    model = load_model(path, use_ema=False)
    if not isinstance(model, ConvClassifier):
        raise CheckpointError(f"{path} does not hold a classifier")
    return FeatureExtractor(model)
