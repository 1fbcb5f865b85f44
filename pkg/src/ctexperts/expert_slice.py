"""Slice-wise expert: pluggable 2D slice encoder + per-slice binary head.

Training samples a contiguous 12-slice subsequence per scan per epoch (or K
distinct random depths in depth-random mode), pushes each slice through the
encoder and head independently, averages the per-slice class probabilities
into one scan-level probability and applies the log loss to that average.
Inference averages over every slice in the stack.

The encoder stands in for a large pretrained image encoder: an ordered layer
sequence (fixed pooling stem, conv blocks, embedding projection) with
per-layer trainability flags, warm-started by a brief rotation-pretext task
so downstream stages really do start from non-random weights. Any encoder
honoring the layer-sequence interface can be dropped in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .nets import ConvBlock2d
from .predictions import ExpertPrediction
from .prep import SliceStack2D
from .rng import stream_seed, substream
from .training import (BestTracker, binary_validation_metrics, check_finite_loss,
                       make_optimizer)

PROB_EPS = 1e-12
SAMPLING_MODES = ("crs", "drs")


class SliceModelError(Exception):
    """Raised for invalid subsequence requests or stack shapes."""


@dataclass(frozen=True)
class SliceEncoderConfig:
    stem_pool: tuple[int, int] = (4, 4)
    channels: tuple[int, ...] = (12, 24, 48)
    embed_dim: int = 32

    def as_dict(self) -> dict:
        return {
            "stem_pool": list(self.stem_pool),
            "channels": list(self.channels),
            "embed_dim": self.embed_dim,
        }


class _Projection(nn.Module):
    """Global average pool + linear map to the embedding dimension."""

    def __init__(self, cin: int, embed_dim: int):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(cin, embed_dim)

    def forward(self, x):
        return self.fc(self.pool(x).flatten(1))


class SliceEncoder(nn.Module):
    """Ordered layer sequence mapping one slice to an embedding vector.

    Layer 0 is a parameter-free mean-pool stem; "the last two layers" always
    means the final two entries of ``self.layers``.
    """

    def __init__(self, config: SliceEncoderConfig = SliceEncoderConfig()):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = [nn.AvgPool2d(config.stem_pool)]
        cin = 1
        for cout in config.channels:
            layers.append(ConvBlock2d(cin, cout, stride=2))
            cin = cout
        layers.append(_Projection(cin, config.embed_dim))
        self.layers = nn.ModuleList(layers)

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def forward(self, slices: torch.Tensor) -> torch.Tensor:
        """(N, 1, H, W) slices -> (N, embed_dim) embeddings."""
        x = slices
        for layer in self.layers:
            x = layer(x)
        return x

    def set_layer_trainable(self, flags: Sequence[bool]) -> None:
        if len(flags) != len(self.layers):
            raise SliceModelError(f"need {len(self.layers)} flags, got {len(flags)}")
        for layer, flag in zip(self.layers, flags):
            for p in layer.parameters():
                p.requires_grad = bool(flag)

    def layer_trainable_flags(self) -> list[bool]:
        flags = []
        for layer in self.layers:
            params = list(layer.parameters())
            flags.append(bool(params) and all(p.requires_grad for p in params))
        return flags

    def freeze_all_but_last_two(self) -> None:
        n = len(self.layers)
        self.set_layer_trainable([i >= n - 2 for i in range(n)])


@dataclass(frozen=True)
class SliceSubsequence:
    """K slices taken from a stack, in depth order."""

    slices: np.ndarray
    indices: tuple[int, ...]

    @property
    def start_offset(self) -> int:
        return self.indices[0]

    @property
    def contiguous(self) -> bool:
        return all(b - a == 1 for a, b in zip(self.indices, self.indices[1:]))


def _stack_array(stack) -> np.ndarray:
    arr = stack.slices if isinstance(stack, SliceStack2D) else np.asarray(stack)
    if arr.ndim != 3:
        raise SliceModelError(f"slice stack must be 3D, got shape {arr.shape}")
    return arr


def sample_contiguous(stack, k: int = 12, rng: np.random.Generator | None = None) -> SliceSubsequence:
    """Contiguous K-slice window with a uniformly drawn start offset."""
    arr = _stack_array(stack)
    n = arr.shape[0]
    if not 1 <= k <= n:
        raise SliceModelError(f"k={k} invalid for a {n}-slice stack")
    if k == n:
        tau = 0
    else:
        if rng is None:
            raise SliceModelError("rng required when more than one offset is possible")
        tau = int(rng.integers(0, n - k + 1))
    return SliceSubsequence(arr[tau:tau + k], tuple(range(tau, tau + k)))


def sample_depth_random(stack, k: int = 12, rng: np.random.Generator | None = None) -> SliceSubsequence:
    """K distinct depths drawn uniformly without replacement, sorted ascending."""
    arr = _stack_array(stack)
    n = arr.shape[0]
    if not 1 <= k <= n:
        raise SliceModelError(f"k={k} invalid for a {n}-slice stack")
    if k == n:
        idx = np.arange(n)
    else:
        if rng is None:
            raise SliceModelError("rng required for depth-random sampling")
        idx = np.sort(rng.choice(n, size=k, replace=False))
    return SliceSubsequence(arr[idx], tuple(int(i) for i in idx))


def slice_probabilities(encoder: SliceEncoder, head: nn.Module,
                        slices: torch.Tensor) -> torch.Tensor:
    """(N, 1, H, W) -> (N, 2) per-slice class probabilities (differentiable)."""
    logits = head(encoder(slices))
    return torch.softmax(logits, dim=1)


def scan_probability_tensor(encoder: SliceEncoder, head: nn.Module,
                            slices: torch.Tensor) -> torch.Tensor:
    """Scan-level probability: arithmetic mean of per-slice probabilities."""
    probs = slice_probabilities(encoder, head, slices)
    if torch.isnan(probs).any():
        raise SliceModelError("NaN slice probabilities")
    return probs.mean(dim=0)


def scan_probability(encoder: SliceEncoder, head: nn.Module,
                     subseq: SliceSubsequence) -> tuple[float, float]:
    """Scan-level (p_non_covid, p_covid) for a sampled subsequence."""
    encoder.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(subseq.slices, dtype=np.float32)).unsqueeze(1)
        p = scan_probability_tensor(encoder, head, x)
    return float(p[0]), float(p[1])


def loss_slice(scan_prob, label: int, eps: float = PROB_EPS):
    """-log of the averaged true-class probability (log applied after the mean)."""
    if torch.is_tensor(scan_prob):
        p = scan_prob[int(label)]
        return -torch.log(torch.clamp(p, min=eps))
    p = float(scan_prob[int(label)])
    if np.isnan(p):
        raise SliceModelError("NaN scan probability")
    return float(-np.log(max(p, eps)))


def make_head(embed_dim: int, n_classes: int = 2) -> nn.Linear:
    return nn.Linear(embed_dim, n_classes)


def pretrain_encoder(slice_pool: np.ndarray, config: SliceEncoderConfig,
                     master_seed: int, steps: int = 40, batch_size: int = 16,
                     lr: float = 2e-3) -> SliceEncoder:
    """Warm-start stand-in: brief self-supervised rotation-pretext training.

    ``slice_pool`` is (M, H, W); each step draws slices, rotates each by a
    random multiple of 90 degrees and trains a throwaway 4-way head to
    recover the rotation. No class labels are consumed.
    """
    torch.manual_seed(stream_seed(master_seed, "stage2a", "pretrain"))
    encoder = SliceEncoder(config)
    probe = nn.Linear(config.embed_dim, 4)
    opt = torch.optim.Adam(list(encoder.parameters()) + list(probe.parameters()), lr=lr)
    rng = substream(master_seed, "stage2a", "pretrain")
    m = slice_pool.shape[0]
    for step in range(steps):
        idx = rng.integers(0, m, size=min(batch_size, m))
        rots = rng.integers(0, 4, size=idx.size)
        batch = [np.rot90(slice_pool[i], k=int(r)).copy() for i, r in zip(idx, rots)]
        x = torch.from_numpy(np.stack(batch).astype(np.float32)).unsqueeze(1)
        logits = probe(encoder(x))
        loss = torch.nn.functional.cross_entropy(logits, torch.as_tensor(rots, dtype=torch.long))
        check_finite_loss(loss, "stage2a-pretrain", 0, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return encoder


@dataclass
class Stage2aTrainConfig:
    sampling: str = "crs"
    k: int = 12
    epochs: int = 12
    lr: float = 2e-3
    scans_per_batch: int = 4
    encoder: SliceEncoderConfig = field(default_factory=SliceEncoderConfig)
    pretrain_steps: int = 40
    encoder_fully_trainable: bool = True

    def __post_init__(self):
        if self.sampling not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {self.sampling!r}; expected {SAMPLING_MODES}")


def _sample(stack: np.ndarray, config: Stage2aTrainConfig,
            rng: np.random.Generator) -> SliceSubsequence:
    k = min(config.k, stack.shape[0])
    if config.sampling == "crs":
        return sample_contiguous(stack, k, rng)
    return sample_depth_random(stack, k, rng)


def train_stage2a(train_items: Sequence[dict], val_items: Sequence[dict],
                  config: Stage2aTrainConfig, master_seed: int,
                  encoder: SliceEncoder | None = None):
    """Train encoder + slice head with scan-level supervision.

    Items carry ``item_id``, ``stack`` (N, H, W) and ``label``. The working
    stacks may be pre-pooled by the encoder stem; pass ``pre_pooled`` stacks
    consistently for train and val. Subsequence offsets are redrawn per scan
    per epoch. Returns (encoder, head, history).
    """
    if not train_items:
        raise ValueError("train_stage2a: empty training set")
    if encoder is None:
        pool = np.stack([item["stack"][item["stack"].shape[0] // 2] for item in train_items])
        encoder = pretrain_encoder(pool, config.encoder, master_seed,
                                   steps=config.pretrain_steps)
    if not config.encoder_fully_trainable:
        encoder.freeze_all_but_last_two()

    torch.manual_seed(stream_seed(master_seed, "stage2a", "head"))
    head = make_head(encoder.embed_dim)
    params = [p for p in encoder.parameters() if p.requires_grad] + list(head.parameters())
    opt, sched = make_optimizer(params, config.lr, config.epochs)
    bundle = nn.ModuleDict({"encoder": encoder, "head": head})
    tracker = BestTracker()
    history = []

    for epoch in range(config.epochs):
        bundle.train()
        rng = substream(master_seed, "stage2a", "epoch", epoch)
        order = rng.permutation(len(train_items))
        epoch_loss, n_steps = 0.0, 0
        for start in range(0, len(order), config.scans_per_batch):
            opt.zero_grad()
            group = order[start:start + config.scans_per_batch]
            losses = []
            for i in group:
                item = train_items[i]
                sub = _sample(item["stack"], config,
                              substream(master_seed, "stage2a", "tau", epoch, item["item_id"]))
                x = torch.from_numpy(np.ascontiguousarray(sub.slices, dtype=np.float32)).unsqueeze(1)
                p = scan_probability_tensor(encoder, head, x)
                losses.append(loss_slice(p, item["label"]))
            loss = torch.stack(losses).mean()
            check_finite_loss(loss, "stage2a", epoch, n_steps)
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            n_steps += 1
        sched.step()

        metrics = _validate(encoder, head, val_items)
        metrics["epoch"] = epoch
        metrics["train_loss"] = epoch_loss / max(1, n_steps)
        tracker.update(bundle, metrics, epoch)
        history.append(metrics)

    tracker.restore(bundle)
    return encoder, head, {"epochs": history, "best_epoch": tracker.best_epoch}


def predict_stage2a(encoder: SliceEncoder, head: nn.Module, stack,
                    scan_id: str = "", variant_id: str = "default") -> ExpertPrediction:
    """Average per-slice probabilities over every slice in the stack."""
    arr = _stack_array(stack)
    sub = SliceSubsequence(arr, tuple(range(arr.shape[0])))
    p0, p1 = scan_probability(encoder, head, sub)
    return ExpertPrediction(scan_id, (p0, p1), expert_id="stage2a", variant_id=variant_id)


def _validate(encoder: SliceEncoder, head: nn.Module, val_items: Sequence[dict]) -> dict:
    labels, hard, scores = [], [], []
    for item in val_items:
        pred = predict_stage2a(encoder, head, item["stack"], scan_id=item["item_id"])
        labels.append(item["label"])
        hard.append(pred.label)
        scores.append(pred.probs[1])
    return binary_validation_metrics(labels, hard, scores)


def save_stage2a(encoder: SliceEncoder, head: nn.Module, path,
                 extra_meta: dict | None = None) -> None:
    bundle = nn.ModuleDict({"encoder": encoder, "head": head})
    meta = {
        "kind": "stage2a",
        "encoder_config": encoder.config.as_dict(),
        "config_hash": checkpoint.config_hash(encoder.config.as_dict()),
        "layer_trainable": encoder.layer_trainable_flags(),
    }
    meta.update(extra_meta or {})
    checkpoint.save_checkpoint(path, bundle.state_dict(), meta)


def load_stage2a(path) -> tuple[SliceEncoder, nn.Linear, dict]:
    params, meta = checkpoint.load_checkpoint(path)
    if meta.get("kind") != "stage2a":
        raise checkpoint.CheckpointError(f"{path}: not a stage2a checkpoint")
    cfg = meta["encoder_config"]
    encoder = SliceEncoder(SliceEncoderConfig(
        stem_pool=tuple(cfg["stem_pool"]), channels=tuple(cfg["channels"]),
        embed_dim=cfg["embed_dim"],
    ))
    head = make_head(encoder.embed_dim)
    bundle = nn.ModuleDict({"encoder": encoder, "head": head})
    checkpoint.load_into_module(bundle, params)
    return encoder, head, meta


__all__ = [
    "SliceEncoder", "SliceEncoderConfig", "SliceSubsequence", "Stage2aTrainConfig",
    "loss_slice", "make_head", "pretrain_encoder", "predict_stage2a",
    "sample_contiguous", "sample_depth_random", "scan_probability",
    "scan_probability_tensor", "slice_probabilities", "train_stage2a",
    "save_stage2a", "load_stage2a", "SAMPLING_MODES",
]
