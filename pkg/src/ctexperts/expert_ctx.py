"""Context expert: inter-slice self-attention over per-slice embeddings.

Takes the slice encoder from the slice-wise expert (classification head
discarded), embeds the 24 slices of a scan, runs the embedding sequence
through two transformer encoder blocks with learned positional embeddings,
mean-pools over slice positions and classifies the pooled representation.

Three build variants controlling trainability and architecture:

- ``trans_only``   encoder fully frozen; the context stack + head train.
- ``trans_last2``  additionally unfreezes the last two encoder layers.
- ``flat_cls``     no context blocks at all; slice embeddings are flattened
                   (concatenated in depth order) straight into the head.
                   Zero attention parameters exist in this variant.

Frozen parameters are a hard contract: they must be bit-identical before and
after training, which holds because the optimizer only ever sees trainable
parameters.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .expert3d import loss_ce
from .expert_slice import SliceEncoder, SliceEncoderConfig, _stack_array
from .nets import TransformerBlock
from .predictions import ExpertPrediction, softmax
from .rng import substream
from .training import (BestTracker, binary_validation_metrics, check_finite_loss,
                       make_optimizer)

VARIANTS = ("trans_only", "trans_last2", "flat_cls")
FLAT_AGGREGATES = ("concat", "mean")


class ContextModelError(Exception):
    """Raised for unknown variants or malformed stacks."""


@dataclass(frozen=True)
class ContextConfig:
    n_slices: int = 24
    n_blocks: int = 2
    n_heads: int = 4
    ff_dim: int = 64
    use_positional: bool = True
    flat_aggregate: str = "concat"

    def __post_init__(self):
        if self.flat_aggregate not in FLAT_AGGREGATES:
            raise ValueError(f"flat_aggregate must be one of {FLAT_AGGREGATES}")

    def as_dict(self) -> dict:
        return {
            "n_slices": self.n_slices,
            "n_blocks": self.n_blocks,
            "n_heads": self.n_heads,
            "ff_dim": self.ff_dim,
            "use_positional": self.use_positional,
            "flat_aggregate": self.flat_aggregate,
        }


class ContextStack(nn.Module):
    """Positional embeddings + transformer blocks over the slice sequence."""

    def __init__(self, embed_dim: int, config: ContextConfig):
        super().__init__()
        if config.use_positional:
            self.pos_embed = nn.Parameter(torch.zeros(config.n_slices, embed_dim))
            nn.init.normal_(self.pos_embed, std=0.02)
        else:
            self.pos_embed = None
        self.blocks = nn.ModuleList(
            TransformerBlock(embed_dim, config.n_heads, config.ff_dim)
            for _ in range(config.n_blocks)
        )

    def forward(self, emb: torch.Tensor, identity_hook: bool = False):
        """(B, n_slices, E) embeddings -> (contextualized, [attn per block])."""
        x = emb if self.pos_embed is None else emb + self.pos_embed
        attns = []
        for block in self.blocks:
            x, attn = block(x, identity_hook=identity_hook)
            attns.append(attn)
        return x, attns


class ContextModel(nn.Module):
    """Slice encoder + optional context stack + scan-level head."""

    def __init__(self, encoder: SliceEncoder, variant: str,
                 config: ContextConfig = ContextConfig()):
        super().__init__()
        if variant not in VARIANTS:
            raise ContextModelError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        self.config = config
        self.encoder = encoder
        e = encoder.embed_dim
        if variant == "flat_cls":
            self.context = None
            head_in = e * config.n_slices if config.flat_aggregate == "concat" else e
        else:
            self.context = ContextStack(e, config)
            head_in = e
        self.head = nn.Linear(head_in, 2)

    def embed(self, slices: torch.Tensor) -> torch.Tensor:
        """(n_slices, 1, H, W) -> (1, n_slices, E) embedding sequence."""
        n = slices.shape[0]
        if n != self.config.n_slices:
            raise ContextModelError(
                f"expected {self.config.n_slices} slices, got {n}")
        return self.encoder(slices).unsqueeze(0)

    def forward_embeddings(self, emb: torch.Tensor, identity_hook: bool = False):
        """(1, n_slices, E) -> (logits (2,), [attn per block])."""
        if self.context is None:
            if self.config.flat_aggregate == "concat":
                pooled = emb.flatten(1)
            else:
                pooled = emb.mean(dim=1)
            return self.head(pooled)[0], []
        x, attns = self.context(emb, identity_hook=identity_hook)
        return self.head(x.mean(dim=1))[0], attns

    def forward(self, slices: torch.Tensor, identity_hook: bool = False):
        return self.forward_embeddings(self.embed(slices), identity_hook=identity_hook)

    def parameter_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {"encoder": [], "context": [], "head": []}
        for name, _ in self.named_parameters():
            groups[name.split(".", 1)[0]].append(name)
        return groups

    def trainable_names(self) -> set[str]:
        return {n for n, p in self.named_parameters() if p.requires_grad}


def build_stage2b(stage2a_encoder: SliceEncoder, variant: str,
                  config: ContextConfig = ContextConfig(),
                  init_seed: int | None = None) -> ContextModel:
    """Clone the encoder, assemble the variant and apply its freeze policy."""
    encoder = copy.deepcopy(stage2a_encoder)
    if init_seed is not None:
        torch.manual_seed(init_seed)
    model = ContextModel(encoder, variant, config)
    n_layers = len(encoder.layers)
    if variant == "trans_last2":
        encoder.set_layer_trainable([i >= n_layers - 2 for i in range(n_layers)])
    else:
        encoder.set_layer_trainable([False] * n_layers)
    return model


def _stack_tensor(stack) -> torch.Tensor:
    arr = _stack_array(stack)
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).unsqueeze(1)


def forward_ctx(model: ContextModel, stack, scan_id: str = "") -> ExpertPrediction:
    """Full inference on one canonical slice stack."""
    model.eval()
    with torch.no_grad():
        logits, _ = model(_stack_tensor(stack))
    probs = softmax(logits.numpy())
    return ExpertPrediction(scan_id, (float(probs[0]), float(probs[1])),
                            expert_id="stage2b", variant_id=model.variant)


def attention_maps(model: ContextModel, stack) -> list[torch.Tensor]:
    """Attention weights per context block, (1, heads, n_slices, n_slices)."""
    model.eval()
    with torch.no_grad():
        _, attns = model(_stack_tensor(stack))
    return attns


@dataclass
class Stage2bTrainConfig:
    variants: tuple[str, ...] = ("trans_last2", "flat_cls")
    epochs: int = 10
    lr: float = 1e-3
    scans_per_batch: int = 4
    context: ContextConfig = field(default_factory=ContextConfig)

    def __post_init__(self):
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(f"unknown variant {v!r}; expected one of {VARIANTS}")


def train_stage2b(train_items: Sequence[dict], val_items: Sequence[dict],
                  model: ContextModel, epochs: int, lr: float,
                  scans_per_batch: int, master_seed: int):
    """Train the unfrozen parameters with scan-level cross-entropy.

    Items carry ``item_id``, ``stack`` (n_slices, H, W) and ``label``.
    Returns (model, history).
    """
    if not train_items:
        raise ValueError("train_stage2b: empty training set")
    trainable = [p for p in model.parameters() if p.requires_grad]
    if not trainable:
        raise ContextModelError("no trainable parameters under the freeze policy")
    opt, sched = make_optimizer(trainable, lr, epochs)
    tracker = BestTracker()
    history = []
    tensors = {item["item_id"]: _stack_tensor(item["stack"]) for item in train_items}

    for epoch in range(epochs):
        model.train()
        rng = substream(master_seed, "stage2b", model.variant, "epoch", epoch)
        order = rng.permutation(len(train_items))
        epoch_loss, n_steps = 0.0, 0
        for start in range(0, len(order), scans_per_batch):
            opt.zero_grad()
            group = order[start:start + scans_per_batch]
            logits = torch.stack([model(tensors[train_items[i]["item_id"]])[0] for i in group])
            labels = [train_items[i]["label"] for i in group]
            loss = loss_ce(logits, labels)
            check_finite_loss(loss, f"stage2b/{model.variant}", epoch, n_steps)
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            n_steps += 1
        sched.step()

        metrics = _validate(model, val_items)
        metrics["epoch"] = epoch
        metrics["train_loss"] = epoch_loss / max(1, n_steps)
        tracker.update(model, metrics, epoch)
        history.append(metrics)

    tracker.restore(model)
    return model, {"epochs": history, "best_epoch": tracker.best_epoch}


def _validate(model: ContextModel, val_items: Sequence[dict]) -> dict:
    labels, hard, scores = [], [], []
    for item in val_items:
        pred = forward_ctx(model, item["stack"], scan_id=item["item_id"])
        labels.append(item["label"])
        hard.append(pred.label)
        scores.append(pred.probs[1])
    return binary_validation_metrics(labels, hard, scores)


def save_stage2b(model: ContextModel, path, extra_meta: dict | None = None) -> None:
    meta = {
        "kind": "stage2b",
        "variant": model.variant,
        "context_config": model.config.as_dict(),
        "encoder_config": model.encoder.config.as_dict(),
        "config_hash": checkpoint.config_hash(
            {"variant": model.variant, **model.config.as_dict()}),
        "encoder_layer_trainable": model.encoder.layer_trainable_flags(),
    }
    meta.update(extra_meta or {})
    checkpoint.save_checkpoint(path, model.state_dict(), meta)


def load_stage2b(path) -> tuple[ContextModel, dict]:
    params, meta = checkpoint.load_checkpoint(path)
    if meta.get("kind") != "stage2b":
        raise checkpoint.CheckpointError(f"{path}: not a stage2b checkpoint")
    enc_cfg = meta["encoder_config"]
    encoder = SliceEncoder(SliceEncoderConfig(
        stem_pool=tuple(enc_cfg["stem_pool"]), channels=tuple(enc_cfg["channels"]),
        embed_dim=enc_cfg["embed_dim"],
    ))
    ctx_cfg = meta["context_config"]
    model = build_stage2b(encoder, meta["variant"], ContextConfig(
        n_slices=ctx_cfg["n_slices"], n_blocks=ctx_cfg["n_blocks"],
        n_heads=ctx_cfg["n_heads"], ff_dim=ctx_cfg["ff_dim"],
        use_positional=ctx_cfg["use_positional"],
        flat_aggregate=ctx_cfg["flat_aggregate"],
    ))
    checkpoint.load_into_module(model, params)
    return model, meta


__all__ = [
    "ContextConfig", "ContextModel", "ContextModelError", "ContextStack",
    "Stage2bTrainConfig", "VARIANTS", "attention_maps", "build_stage2b",
    "forward_ctx", "load_stage2b", "save_stage2b", "train_stage2b",
]
