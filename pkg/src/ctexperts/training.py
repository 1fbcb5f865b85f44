"""Training-loop plumbing shared by all four trainable models.

Checkpoint selection follows one rule everywhere: best validation macro-F1,
ties broken by AUC, then by the earlier epoch. Loss divergence aborts with a
diagnostic instead of silently training on NaNs.
"""

from __future__ import annotations

import copy
import math
import warnings

import numpy as np
import torch

from .metrics import DegenerateClassError, accuracy, auc, macro_f1


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


def check_finite_loss(loss: torch.Tensor, stage: str, epoch: int, step: int) -> None:
    if not bool(torch.isfinite(loss)):
        raise TrainingDiverged(
            f"{stage}: non-finite loss {float(loss.detach())} at epoch {epoch} step {step}"
        )


def make_optimizer(params, lr: float, epochs: int):
    """Adam with cosine decay to zero over the configured epochs."""
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, epochs))
    return opt, sched


def minibatches(n_items: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n_items)
    for start in range(0, n_items, batch_size):
        yield order[start:start + batch_size]


def binary_validation_metrics(labels, hard_preds, covid_scores) -> dict:
    """macro-F1 / ACC / AUC on a validation pass; AUC is NaN when degenerate."""
    out = {
        "macro_f1": macro_f1(labels, hard_preds),
        "acc": accuracy(labels, hard_preds),
    }
    try:
        out["auc"] = auc(labels, covid_scores)
    except DegenerateClassError as exc:
        warnings.warn(f"validation AUC skipped: {exc}")
        out["auc"] = float("nan")
    return out


class BestTracker:
    """Keeps the best model state by (macro-F1, AUC, earlier epoch)."""

    def __init__(self):
        self.best_key: tuple | None = None
        self.best_state: dict | None = None
        self.best_epoch: int = -1

    @staticmethod
    def _key(metrics: dict, epoch: int) -> tuple:
        auc_value = metrics.get("auc", float("nan"))
        if isinstance(auc_value, float) and math.isnan(auc_value):
            auc_value = -1.0
        return (metrics["macro_f1"], auc_value, -epoch)

    def update(self, module: torch.nn.Module, metrics: dict, epoch: int) -> bool:
        key = self._key(metrics, epoch)
        if self.best_key is None or key > self.best_key:
            self.best_key = key
            self.best_state = copy.deepcopy(module.state_dict())
            self.best_epoch = epoch
            return True
        return False

    def restore(self, module: torch.nn.Module) -> None:
        if self.best_state is not None:
            module.load_state_dict(self.best_state)


def snapshot_params(module: torch.nn.Module, trainable: bool) -> dict[str, torch.Tensor]:
    """Clone parameters filtered by requires_grad, for freeze-contract checks."""
    return {
        name: p.detach().clone()
        for name, p in module.named_parameters()
        if p.requires_grad == trainable
    }


def frozen_drift(module: torch.nn.Module, snapshot: dict[str, torch.Tensor]) -> float:
    """Max absolute change over the snapshotted parameters (0.0 means bitwise equal)."""
    worst = 0.0
    for name, before in snapshot.items():
        now = dict(module.named_parameters())[name].detach()
        if now.shape != before.shape:
            return float("inf")
        worst = max(worst, float((now - before).abs().max()))
    return worst
