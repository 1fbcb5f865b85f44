"""Prediction value types and their columnar file formats.

Hard labels derive from probabilities: binary predictions break an exact tie
toward the positive class, source predictions break argmax ties toward the
lowest source index. Files are plain CSV with fixed headers and 8-decimal
probabilities so identical runs serialize byte-identically.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PROB_TOL = 1e-6

EXPERT_COLUMNS = ["scan_id", "split", "expert_id", "variant_id", "p_non_covid", "p_covid"]
SOURCE_COLUMNS = ["scan_id", "split", "p_s0", "p_s1", "p_s2", "p_s3", "predicted_source"]


class PredictionError(Exception):
    """Raised for malformed predictions or prediction files."""


def _check_probs(probs, n: int) -> tuple[float, ...]:
    probs = tuple(float(p) for p in probs)
    if len(probs) != n:
        raise PredictionError(f"expected {n} probabilities, got {len(probs)}")
    if any(p < -PROB_TOL for p in probs) or abs(sum(probs) - 1.0) > PROB_TOL:
        raise PredictionError(f"probabilities must be nonnegative and sum to 1: {probs}")
    return probs


@dataclass(frozen=True)
class ExpertPrediction:
    """Per-scan binary class probabilities from one expert variant."""

    scan_id: str
    probs: tuple[float, float]
    expert_id: str
    variant_id: str

    def __post_init__(self):
        object.__setattr__(self, "probs", _check_probs(self.probs, 2))

    @property
    def label(self) -> int:
        # exact tie resolves to the positive class, matching the fusion tie rule
        return 1 if self.probs[1] >= self.probs[0] else 0


@dataclass(frozen=True)
class SourcePrediction:
    """Per-scan source probabilities; argmax ties go to the lowest index."""

    scan_id: str
    source_probs: tuple[float, float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "source_probs", _check_probs(self.source_probs, 4))

    @property
    def predicted_source(self) -> int:
        return int(np.argmax(self.source_probs))


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def write_expert_predictions(path: str | Path,
                             preds: list[tuple[str, ExpertPrediction]]) -> None:
    """Rows of (split, prediction), sorted for stable bytes."""
    ordered = sorted(preds, key=lambda item: (item[1].scan_id, item[1].variant_id))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EXPERT_COLUMNS)
        for split, p in ordered:
            writer.writerow([p.scan_id, split, p.expert_id, p.variant_id,
                             f"{p.probs[0]:.8f}", f"{p.probs[1]:.8f}"])


def read_expert_predictions(path: str | Path) -> list[tuple[str, ExpertPrediction]]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != EXPERT_COLUMNS:
            raise PredictionError(f"{path}: bad header {header}")
        for rec in reader:
            scan_id, split, expert_id, variant_id, p0, p1 = rec
            out.append((split, ExpertPrediction(scan_id, (float(p0), float(p1)),
                                                expert_id, variant_id)))
    return out


def write_source_predictions(path: str | Path,
                             preds: list[tuple[str, SourcePrediction]]) -> None:
    ordered = sorted(preds, key=lambda item: item[1].scan_id)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SOURCE_COLUMNS)
        for split, p in ordered:
            writer.writerow([p.scan_id, split] + [f"{v:.8f}" for v in p.source_probs]
                            + [p.predicted_source])


def read_source_predictions(path: str | Path) -> list[tuple[str, SourcePrediction]]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SOURCE_COLUMNS:
            raise PredictionError(f"{path}: bad header {header}")
        for rec in reader:
            scan_id, split = rec[0], rec[1]
            probs = tuple(float(v) for v in rec[2:6])
            pred = SourcePrediction(scan_id, probs)
            if pred.predicted_source != int(rec[6]):
                raise PredictionError(f"{path}: stored argmax disagrees for {scan_id}")
            out.append((split, pred))
    return out
