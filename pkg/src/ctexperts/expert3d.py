"""Volumetric expert: 3D conv backbone + binary head on canonical volumes.

The backbone opens with a fixed, parameter-free block-mean stem that pools
the 128x256x256 canonical volume down to a CPU-friendly working size; the
trainable stack is a small residual 3D conv net read out by multi-scale
global mean+std pooling (per-channel first and second spatial moments of
the input and of every stage's output).
Training mixes canonicalized original and lung-extracted volumes according to
the configured input setting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .nets import MultiScaleStatBackbone3d
from .predictions import ExpertPrediction, softmax
from .prep import (AugmentBounds, AugmentCallLog, CanonicalVolume3D, PrepError,
                   augment_scan, pool_volume, sample_augment_params)
from .rng import stream_seed, substream
from .training import (BestTracker, TrainingDiverged, binary_validation_metrics,
                       check_finite_loss, make_optimizer, minibatches)

INPUT_SETTINGS = ("lung", "lung_rot", "orig_lung", "orig")


def loss_ce(logits: torch.Tensor, labels) -> torch.Tensor:
    """Cross-entropy -log softmax(logits)[label], stable via log-sum-exp.

    Accepts a single logit vector or a batch; batches reduce by mean. Works
    for any class count (the source classifier reuses it with 4 classes).
    """
    if not torch.is_tensor(logits):
        logits = torch.as_tensor(logits, dtype=torch.float64)
    if torch.isnan(logits).any() or torch.isinf(logits).any():
        raise ValueError("loss_ce: logits contain NaN/Inf")
    squeeze = logits.ndim == 1
    if squeeze:
        logits = logits.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise ValueError(f"batch mismatch: {logits.shape[0]} logits vs {labels.shape[0]} labels")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(f"labels out of range for {logits.shape[1]} classes")
    log_probs = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    picked = log_probs[torch.arange(logits.shape[0]), labels]
    return -picked.mean()


@dataclass(frozen=True)
class Expert3DConfig:
    in_shape: tuple[int, int, int] = (128, 256, 256)
    stem_pool: tuple[int, int, int] = (4, 4, 4)
    channels: tuple[int, ...] = (8, 16, 32)
    blocks_per_stage: int = 1
    n_classes: int = 2

    def pooled_shape(self) -> tuple[int, int, int]:
        return tuple(d // f for d, f in zip(self.in_shape, self.stem_pool))

    def feature_dim(self) -> int:
        """Pooled feature width: mean + std per channel at every scale."""
        return 2 * (1 + sum(self.channels))

    def as_dict(self) -> dict:
        return {
            "in_shape": list(self.in_shape),
            "stem_pool": list(self.stem_pool),
            "channels": list(self.channels),
            "blocks_per_stage": self.blocks_per_stage,
            "n_classes": self.n_classes,
        }


def build_backbone3d(config: "Expert3DConfig") -> MultiScaleStatBackbone3d:
    """Residual 3D conv stack with multi-scale global mean+std readout."""
    return MultiScaleStatBackbone3d(config.channels, config.blocks_per_stage)


class Volume3DModel(nn.Module):
    """Parameter groups are exactly {backbone, head}."""

    def __init__(self, config: Expert3DConfig = Expert3DConfig()):
        super().__init__()
        self.config = config
        self.backbone = build_backbone3d(config)
        self.head = nn.Linear(config.feature_dim(), config.n_classes)

    def stem(self, volume) -> torch.Tensor:
        """Fixed block-mean pooling from canonical to working resolution."""
        vox = volume.voxels if isinstance(volume, CanonicalVolume3D) else np.asarray(volume)
        if vox.shape != self.config.in_shape:
            raise PrepError(f"expected canonical shape {self.config.in_shape}, got {vox.shape}")
        pooled = pool_volume(vox.astype(np.float32), self.config.stem_pool)
        return torch.from_numpy(pooled).unsqueeze(0).unsqueeze(0)

    def features(self, pooled: torch.Tensor) -> torch.Tensor:
        if pooled.ndim != 5:
            raise PrepError(f"expected (B,1,D,H,W) input, got {tuple(pooled.shape)}")
        return self.backbone(pooled)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(pooled))

    def parameter_groups(self) -> dict[str, list[str]]:
        return {
            "backbone": [f"backbone.{n}" for n, _ in self.backbone.named_parameters()],
            "head": [f"head.{n}" for n, _ in self.head.named_parameters()],
        }


def predict_3d(model: Volume3DModel, volume, scan_id: str = "",
               variant_id: str = "default") -> ExpertPrediction:
    """Deterministic softmax prediction on one canonical volume."""
    model.eval()
    with torch.no_grad():
        logits = model(model.stem(volume))[0].numpy()
    probs = softmax(logits)
    return ExpertPrediction(scan_id, (float(probs[0]), float(probs[1])),
                            expert_id="stage1", variant_id=variant_id)


@dataclass
class Stage1TrainConfig:
    setting: str = "orig_lung"
    epochs: int = 12
    batch_size: int = 8
    lr: float = 3e-3
    model: Expert3DConfig = field(default_factory=Expert3DConfig)
    augment_bounds: AugmentBounds = field(default_factory=AugmentBounds)

    def __post_init__(self):
        if self.setting not in INPUT_SETTINGS:
            raise ValueError(f"unknown input setting {self.setting!r}; expected one of {INPUT_SETTINGS}")

    @property
    def kinds(self) -> tuple[str, ...]:
        return {
            "lung": ("lung",),
            "lung_rot": ("lung",),
            "orig_lung": ("orig", "lung"),
            "orig": ("orig",),
        }[self.setting]

    @property
    def augment(self) -> bool:
        return self.setting == "lung_rot"


def _item_tensor(item: dict, config: Stage1TrainConfig, epoch: int, master_seed: int,
                 log: AugmentCallLog | None) -> np.ndarray:
    """Pooled input for one training item, with optional per-scan augmentation."""
    canonical = item.get("canonical")
    if canonical is None and "canonical_path" in item:
        from . import storage  # local import: storage is optional for in-memory runs

        canonical = CanonicalVolume3D(storage.read_volume(item["canonical_path"]))
    if config.augment and canonical is not None:
        rng = substream(master_seed, "stage1", "augment", epoch, item["item_id"])
        params = sample_augment_params(rng, config.augment_bounds)
        vol = augment_scan(canonical, params, log=log, scan_id=item["item_id"])
        return pool_volume(vol.voxels, config.model.stem_pool)
    return item["x"]


def train_stage1(train_items: Sequence[dict], val_items: Sequence[dict],
                 config: Stage1TrainConfig, master_seed: int,
                 augment_log: AugmentCallLog | None = None):
    """Train the volumetric expert; returns (model, history).

    Items carry ``item_id``, ``label`` and either a precomputed pooled input
    ``x`` or (for the rotation setting) the ``canonical`` volume to augment
    per epoch. The best epoch by validation macro-F1 is restored before
    returning.
    """
    if not train_items:
        raise ValueError("train_stage1: empty training set")
    kinds = {item.get("kind", "orig") for item in train_items}
    for kind in config.kinds:
        if kind not in kinds:
            raise ValueError(f"setting {config.setting!r} needs {kind!r} inputs, "
                             f"found kinds {sorted(kinds)}")

    torch.manual_seed(stream_seed(master_seed, "stage1", "init"))
    model = Volume3DModel(config.model)
    opt, sched = make_optimizer(model.parameters(), config.lr, config.epochs)
    tracker = BestTracker()
    history = []

    for epoch in range(config.epochs):
        model.train()
        shuffle_rng = substream(master_seed, "stage1", "shuffle", epoch)
        epoch_loss = 0.0
        n_batches = 0
        for batch_idx in minibatches(len(train_items), config.batch_size, shuffle_rng):
            xs = np.stack([
                _item_tensor(train_items[i], config, epoch, master_seed, augment_log)
                for i in batch_idx
            ])
            labels = [train_items[i]["label"] for i in batch_idx]
            logits = model(torch.from_numpy(xs).unsqueeze(1))
            loss = loss_ce(logits, labels)
            check_finite_loss(loss, "stage1", epoch, n_batches)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        sched.step()

        metrics = _validate(model, val_items)
        metrics["epoch"] = epoch
        metrics["train_loss"] = epoch_loss / max(1, n_batches)
        tracker.update(model, metrics, epoch)
        history.append(metrics)

    tracker.restore(model)
    return model, {"epochs": history, "best_epoch": tracker.best_epoch}


def _validate(model: Volume3DModel, val_items: Sequence[dict]) -> dict:
    model.eval()
    labels, hard, scores = [], [], []
    with torch.no_grad():
        for item in val_items:
            logits = model(torch.from_numpy(item["x"]).unsqueeze(0).unsqueeze(0))[0]
            probs = softmax(logits.numpy())
            labels.append(item["label"])
            hard.append(1 if probs[1] >= probs[0] else 0)
            scores.append(float(probs[1]))
    return binary_validation_metrics(labels, hard, scores)


def save_stage1(model: Volume3DModel, path, extra_meta: dict | None = None) -> None:
    meta = {
        "kind": "stage1",
        "model_config": model.config.as_dict(),
        "config_hash": checkpoint.config_hash(model.config.as_dict()),
        "parameter_groups": model.parameter_groups(),
    }
    meta.update(extra_meta or {})
    checkpoint.save_checkpoint(path, model.state_dict(), meta)


def load_stage1(path) -> tuple[Volume3DModel, dict]:
    params, meta = checkpoint.load_checkpoint(path)
    if meta.get("kind") != "stage1":
        raise checkpoint.CheckpointError(f"{path}: not a stage1 checkpoint")
    cfg = meta["model_config"]
    model = Volume3DModel(Expert3DConfig(
        in_shape=tuple(cfg["in_shape"]), stem_pool=tuple(cfg["stem_pool"]),
        channels=tuple(cfg["channels"]), blocks_per_stage=cfg["blocks_per_stage"],
        n_classes=cfg["n_classes"],
    ))
    checkpoint.load_into_module(model, params)
    return model, meta


__all__ = [
    "Expert3DConfig", "Stage1TrainConfig", "TrainingDiverged", "Volume3DModel",
    "build_backbone3d", "loss_ce", "predict_3d", "train_stage1", "save_stage1",
    "load_stage1", "INPUT_SETTINGS",
]
