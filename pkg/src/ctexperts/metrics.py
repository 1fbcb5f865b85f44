"""Evaluation metrics: accuracy, macro-F1, rank-based AUC, per-source F1.

AUC uses average ranks, i.e. the Mann-Whitney statistic with half credit for
score ties, which equals trapezoidal ROC integration. A single-class input is
a hard error naming the degenerate class rather than a silent NaN: zero-
positive validation slices are exactly the failure mode this pipeline exists
to handle, and they must be loud.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


class DegenerateClassError(ValueError):
    """Raised when a metric is undefined because only one class is present."""


def _as_int_array(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    return arr.astype(np.int64)


def accuracy(labels, predictions) -> float:
    labels = _as_int_array(labels, "labels")
    predictions = _as_int_array(predictions, "predictions")
    if labels.shape != predictions.shape:
        raise ValueError(f"length mismatch: {labels.shape} vs {predictions.shape}")
    return float(np.mean(labels == predictions))


def confusion_counts(labels, predictions, n_classes: int = 2) -> np.ndarray:
    """Counts[i, j] = number of samples with true class i predicted as j."""
    labels = _as_int_array(labels, "labels")
    predictions = _as_int_array(predictions, "predictions")
    if labels.shape != predictions.shape:
        raise ValueError(f"length mismatch: {labels.shape} vs {predictions.shape}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return counts


def f1_for_class(labels, predictions, cls: int) -> float:
    """F1 of one class; 0 when precision+recall is 0 (no true or predicted hits)."""
    labels = _as_int_array(labels, "labels")
    predictions = _as_int_array(predictions, "predictions")
    tp = int(np.sum((labels == cls) & (predictions == cls)))
    fp = int(np.sum((labels != cls) & (predictions == cls)))
    fn = int(np.sum((labels == cls) & (predictions != cls)))
    if tp == 0 and fp == 0 and fn == 0:
        warnings.warn(f"class {cls} absent from labels and predictions; F1 set to 0")
        return 0.0
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def macro_f1(labels, predictions, n_classes: int = 2) -> float:
    """Unweighted mean of per-class F1 over all ``n_classes`` classes."""
    labels = _as_int_array(labels, "labels")
    predictions = _as_int_array(predictions, "predictions")
    if labels.shape != predictions.shape:
        raise ValueError(f"length mismatch: {labels.shape} vs {predictions.shape}")
    return float(np.mean([f1_for_class(labels, predictions, c) for c in range(n_classes)]))


def auc(labels, scores) -> float:
    """Rank-based AUC of ``scores`` against binary ``labels``, ties half-credited."""
    labels = _as_int_array(labels, "labels")
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise ValueError(f"length mismatch: {labels.shape} vs {scores.shape}")
    if not np.isfinite(scores).all():
        raise ValueError("scores contain NaN/Inf")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        present = 1 if n_pos else 0
        raise DegenerateClassError(
            f"AUC undefined: only class {present} present in labels"
        )
    ranks = rankdata(scores)
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def per_source_f1(labels, predictions, sources, style: str = "positive") -> dict[int, float]:
    """Source-restricted F1 per source subset.

    ``style='positive'`` reports the COVID-class F1 inside each subset;
    ``style='macro'`` reports the subset macro-F1. Subsets that are empty, or
    where the positive class never occurs in labels or predictions, are
    skipped with a warning instead of reporting a meaningless 0.
    """
    if style not in ("positive", "macro"):
        raise ValueError(f"unknown per-source F1 style {style!r}")
    labels = _as_int_array(labels, "labels")
    predictions = _as_int_array(predictions, "predictions")
    sources = _as_int_array(sources, "sources")
    if not labels.shape == predictions.shape == sources.shape:
        raise ValueError("labels/predictions/sources length mismatch")
    out: dict[int, float] = {}
    for src in sorted(set(sources.tolist())):
        mask = sources == src
        sub_labels = labels[mask]
        sub_preds = predictions[mask]
        if sub_labels.size == 0:
            warnings.warn(f"source {src}: empty subset, skipped")
            continue
        if style == "positive":
            if not np.any(sub_labels == 1) and not np.any(sub_preds == 1):
                warnings.warn(f"source {src}: no true or predicted positives, skipped")
                continue
            out[src] = f1_for_class(sub_labels, sub_preds, 1)
        else:
            out[src] = macro_f1(sub_labels, sub_preds)
    return out


@dataclass
class MetricsReport:
    acc: float
    macro_f1: float
    auc: float
    per_source_f1: dict[int, float] = field(default_factory=dict)
    confusion: list[list[int]] = field(default_factory=list)
    n_samples: int = 0

    def as_dict(self) -> dict:
        keys = {
            "ACC": self.acc,
            "Macro-F1": self.macro_f1,
            "AUC": self.auc,
        }
        for src, value in sorted(self.per_source_f1.items()):
            keys[f"S{src}"] = value
        return keys

    def render_text(self) -> str:
        parts = [f"{k} {v:.4f}" for k, v in self.as_dict().items()]
        return "  ".join(parts)


def compute_report(labels, predictions, scores, sources=None,
                   per_source_style: str = "positive") -> MetricsReport:
    """Full report over one evaluation run; ``scores`` are positive-class scores."""
    labels = _as_int_array(labels, "labels")
    predictions = _as_int_array(predictions, "predictions")
    report = MetricsReport(
        acc=accuracy(labels, predictions),
        macro_f1=macro_f1(labels, predictions),
        auc=auc(labels, scores),
        confusion=confusion_counts(labels, predictions).tolist(),
        n_samples=int(labels.size),
    )
    if sources is not None:
        report.per_source_f1 = per_source_f1(labels, predictions, sources,
                                             style=per_source_style)
    return report
