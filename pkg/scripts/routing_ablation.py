#!/usr/bin/env python3
"""Compare fusion policies on an already-predicted run.

Re-fuses the per-stage prediction files under three policies and scores each
against ground truth, without retraining anything:

    routed        source-0 scans decided by the volumetric expert alone,
                  everything else by the three-expert vote (the default)
    vote_all      three-expert vote for every scan (routing disabled)
    stage1_only   the volumetric expert decides every scan

Usage:
    python scripts/routing_ablation.py --config runs/demo.yaml [--split test]
"""

from __future__ import annotations

import argparse
from pathlib import Path

from ctexperts import datasets
from ctexperts.config import load_config
from ctexperts.ensemble import VoteConfig, route_and_predict, within_stage_vote
from ctexperts.metrics import compute_report
from ctexperts.pipeline import RunPaths
from ctexperts.predictions import read_expert_predictions, read_source_predictions
from ctexperts.synth import read_truth

STAGES = ("stage1", "stage2a", "stage2b")


def load_stage_votes(paths: RunPaths, split: str, rule: str):
    """Per-scan aggregated stage predictions and source predictions."""
    votes: dict[str, dict] = {}
    for stage in STAGES:
        grouped: dict[str, list] = {}
        for _, pred in read_expert_predictions(paths.predictions / f"{split}_{stage}.csv"):
            grouped.setdefault(pred.scan_id, []).append(pred)
        for scan_id, preds in grouped.items():
            votes.setdefault(scan_id, {})[stage] = within_stage_vote(preds, rule).prediction
    sources = {p.scan_id: p for _, p in
               read_source_predictions(paths.predictions / f"{split}_source.csv")}
    return votes, sources


def load_truth(paths: RunPaths, split: str) -> dict[str, tuple[int, int]]:
    """scan_id -> (source, label) for the scored split."""
    if split == "test":
        return read_truth(paths.dataset / "truth.csv")
    return {r.scan_id: (r.source, r.label)
            for r in datasets.read_prep_manifest(paths.prep) if r.split == split}


def score(finals, truth) -> dict:
    labels = [truth[f.scan_id][1] for f in finals]
    sources = [truth[f.scan_id][0] for f in finals]
    preds = [f.label for f in finals]
    scores = [f.probs[1] for f in finals]
    return compute_report(labels, preds, scores, sources).as_dict()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, required=True)
    parser.add_argument("--split", choices=("val", "test"), default="test")
    args = parser.parse_args(argv)

    cfg = load_config(args.config)
    paths = RunPaths.from_config(cfg)
    rule = cfg.vote.to_vote_config().within_stage_rule
    votes, sources = load_stage_votes(paths, args.split, rule)
    truth = load_truth(paths, args.split)

    policies = {
        "routed": lambda sid: route_and_predict(votes[sid], sources[sid], VoteConfig()),
        "vote_all": lambda sid: route_and_predict(
            votes[sid], sources[sid], VoteConfig(source0_route=False)),
        "stage1_only": lambda sid: route_and_predict(
            {"stage1": votes[sid]["stage1"]}, sources[sid],
            VoteConfig(source0_route=False, stages=("stage1",))),
    }

    header = f"{'policy':<12} {'ACC':>7} {'Macro-F1':>9} {'AUC':>7}  " \
             + " ".join(f"{f'S{i}-F1':>6}" for i in range(4))
    print(f"split: {args.split} ({len(votes)} scans)")
    print(header)
    print("-" * len(header))
    for name, decide in policies.items():
        finals = [decide(sid) for sid in sorted(votes)]
        rep = score(finals, truth)
        per_src = " ".join(f"{rep[f'S{i}']:6.4f}" for i in range(4))
        print(f"{name:<12} {rep['ACC']:7.4f} {rep['Macro-F1']:9.4f} "
              f"{rep['AUC']:7.4f}  {per_src}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
