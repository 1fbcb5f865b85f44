"""Hierarchical fusion: within-stage variant voting, then cross-expert voting.

Each stage first aggregates its registered variants into a single stage-level
prediction. The default rule takes the majority hard label and averages the
winning voters' probabilities (so the aggregated probabilities agree with the
aggregated label); an even split falls back to the mean probability over all
variants, with an exact 0.5 mean resolving to the positive class and flagged.

The stage-level predictions then vote by simple majority. Scans attributed to
source 0 by the source classifier skip the vote entirely and take the
volumetric expert's answer alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .predictions import ExpertPrediction, SourcePrediction

WITHIN_STAGE_RULES = ("majority_then_mean_prob", "mean_prob")
CROSS_EXPERT_RULES = ("majority",)
ROUTE_STAGE1_ONLY = "stage1_only"
ROUTE_ENSEMBLE = "three_expert_vote"
DEFAULT_STAGES = ("stage1", "stage2a", "stage2b")


class VotingError(Exception):
    """Raised for empty votes, mixed stages, or missing required experts."""


@dataclass(frozen=True)
class VoteConfig:
    within_stage_rule: str = "majority_then_mean_prob"
    cross_expert_rule: str = "majority"
    source0_route: bool = True
    stages: tuple[str, ...] = DEFAULT_STAGES

    def __post_init__(self):
        if self.within_stage_rule not in WITHIN_STAGE_RULES:
            raise ValueError(f"within_stage_rule must be one of {WITHIN_STAGE_RULES}")
        if self.cross_expert_rule not in CROSS_EXPERT_RULES:
            raise ValueError(f"cross_expert_rule must be one of {CROSS_EXPERT_RULES}")
        if not self.stages:
            raise ValueError("at least one stage required")


@dataclass(frozen=True)
class StageVote:
    """One stage's aggregated prediction plus how the vote resolved."""

    prediction: ExpertPrediction
    hard_votes: tuple[int, ...]
    tie_broken_by_mean: bool
    exact_half_flag: bool


@dataclass(frozen=True)
class FinalPrediction:
    scan_id: str
    label: int
    probs: tuple[float, float]
    route: str
    predicted_source: int | None
    stage_labels: dict[str, int]


def _mean_probs(preds: Sequence[ExpertPrediction]) -> tuple[float, float]:
    arr = np.asarray([p.probs for p in preds], dtype=np.float64).mean(axis=0)
    return float(arr[0]), float(arr[1])


def within_stage_vote(preds: Sequence[ExpertPrediction],
                      rule: str = "majority_then_mean_prob") -> StageVote:
    """Aggregate one stage's variant predictions into a single prediction."""
    if not preds:
        raise VotingError("within_stage_vote: no variant predictions")
    if rule not in WITHIN_STAGE_RULES:
        raise VotingError(f"unknown within-stage rule {rule!r}")
    stages = {p.expert_id for p in preds}
    scan_ids = {p.scan_id for p in preds}
    if len(stages) != 1 or len(scan_ids) != 1:
        raise VotingError(f"mixed vote: stages={sorted(stages)} scans={sorted(scan_ids)}")
    stage = preds[0].expert_id
    votes = tuple(p.label for p in preds)

    tie_broken = False
    exact_half = False
    if rule == "mean_prob":
        probs = _mean_probs(preds)
    else:
        n_pos = sum(votes)
        if 2 * n_pos > len(votes):
            winners = [p for p in preds if p.label == 1]
        elif 2 * n_pos < len(votes):
            winners = [p for p in preds if p.label == 0]
        else:
            winners = list(preds)
            tie_broken = True
        probs = _mean_probs(winners)
        exact_half = tie_broken and probs[0] == probs[1]

    agg = ExpertPrediction(preds[0].scan_id, probs, expert_id=stage, variant_id="vote")
    return StageVote(agg, votes, tie_broken, exact_half)


def cross_expert_vote(stage_preds: Mapping[str, ExpertPrediction]) -> tuple[int, tuple[float, float]]:
    """Majority vote over stage-level predictions; returns (label, probs).

    The returned probabilities are the mean over the voters on the winning
    side, so their argmax matches the majority label. An even label split
    (possible only with an even stage count) resolves by the all-voter mean.
    """
    if not stage_preds:
        raise VotingError("cross_expert_vote: no stage predictions")
    preds = list(stage_preds.values())
    scan_ids = {p.scan_id for p in preds}
    if len(scan_ids) != 1:
        raise VotingError(f"cross_expert_vote: mixed scans {sorted(scan_ids)}")
    n_pos = sum(p.label for p in preds)
    if 2 * n_pos > len(preds):
        winners = [p for p in preds if p.label == 1]
        label = 1
    elif 2 * n_pos < len(preds):
        winners = [p for p in preds if p.label == 0]
        label = 0
    else:
        winners = preds
        probs = _mean_probs(winners)
        return (1 if probs[1] >= probs[0] else 0), probs
    return label, _mean_probs(winners)


def route_and_predict(stage_preds: Mapping[str, ExpertPrediction],
                      source_pred: SourcePrediction | None,
                      config: VoteConfig = VoteConfig()) -> FinalPrediction:
    """Source-aware final decision for one scan.

    ``stage_preds`` maps stage id to that stage's aggregated prediction. When
    the source classifier says source 0 (and routing is enabled), the
    volumetric expert decides alone; otherwise all configured stages vote.
    """
    missing = [s for s in config.stages if s not in stage_preds]
    if missing:
        raise VotingError(f"missing stage predictions: {missing}")
    scan_ids = {stage_preds[s].scan_id for s in config.stages}
    if len(scan_ids) != 1:
        raise VotingError(f"route_and_predict: mixed scans {sorted(scan_ids)}")
    scan_id = next(iter(scan_ids))
    if source_pred is not None and source_pred.scan_id != scan_id:
        raise VotingError(f"source prediction for {source_pred.scan_id!r} "
                          f"does not match scan {scan_id!r}")

    predicted_source = source_pred.predicted_source if source_pred is not None else None
    stage_labels = {s: stage_preds[s].label for s in config.stages}

    if config.source0_route and predicted_source == 0:
        if "stage1" not in stage_preds:
            raise VotingError("source-0 routing requires a stage1 prediction")
        anchor = stage_preds["stage1"]
        return FinalPrediction(scan_id, anchor.label, anchor.probs,
                               ROUTE_STAGE1_ONLY, predicted_source, stage_labels)

    label, probs = cross_expert_vote({s: stage_preds[s] for s in config.stages})
    return FinalPrediction(scan_id, label, probs, ROUTE_ENSEMBLE,
                           predicted_source, stage_labels)


__all__ = [
    "CROSS_EXPERT_RULES", "DEFAULT_STAGES", "FinalPrediction", "ROUTE_ENSEMBLE",
    "ROUTE_STAGE1_ONLY", "StageVote", "VoteConfig", "VotingError",
    "WITHIN_STAGE_RULES", "cross_expert_vote", "route_and_predict",
    "within_stage_vote",
]
