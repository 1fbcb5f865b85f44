"""Source classifier: frozen volumetric backbone + fresh 4-way source head.

The backbone is copied from a trained volumetric expert and kept fixed —
bitwise — while a new linear head learns to name the acquisition source of a
scan. Because the backbone never moves (and contains no batch statistics),
features are extracted once per scan and the head trains on the cache. The
pooled features span several orders of magnitude across dimensions, so the
head sees them standardized by train-split statistics; the statistics live
in non-trainable buffers and the backbone parameters stay untouched.
"""

from __future__ import annotations

import copy
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .expert3d import Expert3DConfig, Volume3DModel, build_backbone3d, loss_ce
from .ledger import SOURCES
from .metrics import accuracy, macro_f1
from .predictions import SourcePrediction, softmax
from .prep import CanonicalVolume3D, PrepError, pool_volume
from .rng import substream
from .training import BestTracker, check_finite_loss, make_optimizer, minibatches

N_SOURCES = len(SOURCES)


class SourceTrainingError(Exception):
    """Raised when the training split cannot support 4-way source learning."""


class SourceClassifier(nn.Module):
    """Frozen 3D backbone + feature standardization + trainable source head."""

    def __init__(self, config: Expert3DConfig, n_sources: int = N_SOURCES):
        super().__init__()
        self.config = config
        self.n_sources = n_sources
        self.backbone = build_backbone3d(config)
        self.head = nn.Linear(config.feature_dim(), n_sources)
        self.register_buffer("feat_mean", torch.zeros(config.feature_dim()))
        self.register_buffer("feat_scale", torch.ones(config.feature_dim()))

    def stem(self, volume) -> torch.Tensor:
        vox = volume.voxels if isinstance(volume, CanonicalVolume3D) else np.asarray(volume)
        if vox.shape != self.config.in_shape:
            raise PrepError(f"expected canonical shape {self.config.in_shape}, got {vox.shape}")
        pooled = pool_volume(vox.astype(np.float32), self.config.stem_pool)
        return torch.from_numpy(pooled).unsqueeze(0).unsqueeze(0)

    def features(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.backbone(pooled)

    def normalize(self, feats: torch.Tensor) -> torch.Tensor:
        return (feats - self.feat_mean) / self.feat_scale

    def set_feature_stats(self, feats: torch.Tensor) -> None:
        """Fit the standardization buffers on (typically train-split) features."""
        self.feat_mean.copy_(feats.mean(dim=0))
        self.feat_scale.copy_(feats.std(dim=0, unbiased=False).clamp_min(1e-6))

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.head(self.normalize(self.features(pooled)))


def build_source_clf(stage1_model: Volume3DModel,
                     init_seed: int | None = None) -> SourceClassifier:
    """Copy and freeze the volumetric backbone; attach an untrained head."""
    if init_seed is not None:
        torch.manual_seed(init_seed)
    clf = SourceClassifier(stage1_model.config)
    clf.backbone = copy.deepcopy(stage1_model.backbone)
    for p in clf.backbone.parameters():
        p.requires_grad = False
    return clf


def _cache_features(clf: SourceClassifier, items: Sequence[dict]) -> torch.Tensor:
    clf.eval()
    with torch.no_grad():
        feats = [clf.features(torch.from_numpy(item["x"]).unsqueeze(0).unsqueeze(0))[0]
                 for item in items]
    return torch.stack(feats)


def train_source_clf(train_items: Sequence[dict], val_items: Sequence[dict],
                     clf: SourceClassifier, epochs: int, lr: float,
                     batch_size: int, master_seed: int):
    """Train the source head on cached frozen-backbone features.

    Items carry ``item_id``, ``x`` (pooled volume) and ``source``. All four
    sources must appear in the training split. Returns (clf, history).
    """
    if not train_items:
        raise SourceTrainingError("empty training set")
    present = {item["source"] for item in train_items}
    missing = [s for s in range(clf.n_sources) if s not in present]
    if missing:
        raise SourceTrainingError(
            f"training split is missing source classes {missing}; "
            f"cannot fit a {clf.n_sources}-way source head")

    train_x = _cache_features(clf, train_items)
    clf.set_feature_stats(train_x)
    train_x = clf.normalize(train_x)
    train_y = torch.as_tensor([item["source"] for item in train_items], dtype=torch.long)
    val_x = clf.normalize(_cache_features(clf, val_items)) if val_items else None
    val_y = [item["source"] for item in val_items]

    opt, sched = make_optimizer(clf.head.parameters(), lr, epochs)
    tracker = BestTracker()
    history = []
    for epoch in range(epochs):
        rng = substream(master_seed, "stage3", "shuffle", epoch)
        epoch_loss, n_batches = 0.0, 0
        for batch_idx in minibatches(len(train_items), batch_size, rng):
            idx = torch.as_tensor(batch_idx, dtype=torch.long)
            loss = loss_ce(clf.head(train_x[idx]), train_y[idx])
            check_finite_loss(loss, "stage3", epoch, n_batches)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        sched.step()

        metrics = _validate(clf, val_x, val_y)
        metrics["epoch"] = epoch
        metrics["train_loss"] = epoch_loss / max(1, n_batches)
        tracker.update(clf, metrics, epoch)
        history.append(metrics)

    tracker.restore(clf)
    return clf, {"epochs": history, "best_epoch": tracker.best_epoch}


def _validate(clf: SourceClassifier, val_x: torch.Tensor | None, val_y: list) -> dict:
    if val_x is None:
        return {"macro_f1": float("nan"), "acc": float("nan"), "auc": float("nan")}
    with torch.no_grad():
        hard = clf.head(val_x).argmax(dim=1).tolist()
    return {
        "macro_f1": macro_f1(val_y, hard, n_classes=clf.n_sources),
        "acc": accuracy(val_y, hard),
        "auc": float("nan"),
    }


def predict_source(clf: SourceClassifier, volume, scan_id: str = "") -> SourcePrediction:
    """4-way source probabilities for one canonical (or pre-pooled) volume."""
    clf.eval()
    with torch.no_grad():
        x = volume if torch.is_tensor(volume) else clf.stem(volume)
        logits = clf(x)[0].numpy()
    probs = softmax(logits)
    return SourcePrediction(scan_id, tuple(float(p) for p in probs))


def predict_source_pooled(clf: SourceClassifier, pooled: np.ndarray,
                          scan_id: str = "") -> SourcePrediction:
    return predict_source(clf, torch.from_numpy(pooled).unsqueeze(0).unsqueeze(0),
                          scan_id=scan_id)


def save_stage3(clf: SourceClassifier, path, extra_meta: dict | None = None) -> None:
    meta = {
        "kind": "stage3",
        "model_config": clf.config.as_dict(),
        "n_sources": clf.n_sources,
        "config_hash": checkpoint.config_hash(clf.config.as_dict()),
    }
    meta.update(extra_meta or {})
    checkpoint.save_checkpoint(path, clf.state_dict(), meta)


def load_stage3(path) -> tuple[SourceClassifier, dict]:
    params, meta = checkpoint.load_checkpoint(path)
    if meta.get("kind") != "stage3":
        raise checkpoint.CheckpointError(f"{path}: not a stage3 checkpoint")
    cfg = meta["model_config"]
    clf = SourceClassifier(Expert3DConfig(
        in_shape=tuple(cfg["in_shape"]), stem_pool=tuple(cfg["stem_pool"]),
        channels=tuple(cfg["channels"]), blocks_per_stage=cfg["blocks_per_stage"],
        n_classes=cfg["n_classes"],
    ), n_sources=meta["n_sources"])
    checkpoint.load_into_module(clf, params)
    for p in clf.backbone.parameters():
        p.requires_grad = False
    return clf, meta


__all__ = [
    "N_SOURCES", "SourceClassifier", "SourceTrainingError", "build_source_clf",
    "load_stage3", "predict_source", "predict_source_pooled", "save_stage3",
    "train_source_clf",
]
