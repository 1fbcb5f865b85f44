"""Command-line entry point.

Seven subcommands mirror the pipeline steps: synth, prep, train, predict,
fuse, evaluate, report. Every command takes ``--config`` pointing at the YAML
run configuration. Exit code 0 on success; expected failures print one
``ctexperts: error: <category>: <message>`` line on stderr and exit 1.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .ensemble import VotingError
from .expert_ctx import ContextModelError
from .expert_slice import SliceModelError
from .ledger import LedgerError
from .metrics import DegenerateClassError
from .predictions import PredictionError
from .prep import PrepError
from .source_clf import SourceTrainingError
from .storage import StorageError
from .synth import SynthError
from .training import TrainingDiverged

_EXPECTED_ERRORS = (
    CheckpointError, ConfigError, ContextModelError, DegenerateClassError,
    LedgerError, PredictionError, PrepError, SliceModelError,
    SourceTrainingError, StorageError, SynthError, TrainingDiverged,
    VotingError, pipeline.PipelineError, FileNotFoundError, ValueError,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctexperts",
        description="Source-aware multi-expert pipeline for volumetric CT classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str, split: bool = False) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the YAML run config")
        if split:
            p.add_argument("--split", default="test", choices=("train", "val", "test"),
                           help="which split to operate on (default: test)")
        return p

    add("synth", "generate the synthetic dataset from the scaled ledger")
    add("prep", "canonicalize all scans into the preprocessing cache")
    train = add("train", "train one stage (or all stages in dependency order)")
    train.add_argument("--stage", required=True, choices=(*pipeline.STAGES, "all"),
                       help="which stage to train")
    add("predict", "write per-expert and source predictions", split=True)
    add("fuse", "vote within stages, route by source, write final labels", split=True)
    add("evaluate", "score fused predictions against the generated truth", split=True)
    add("report", "assemble a text report from the run artifacts")
    return parser


def _run(args: argparse.Namespace) -> None:
    cfg = load_config(args.config)
    if args.command == "synth":
        out = pipeline.run_synth(cfg)
        print(f"synth: dataset written to {out}")
    elif args.command == "prep":
        summary = pipeline.run_prep(cfg)
        print(f"prep: cached {summary['n_scans']} scans "
              f"({summary['n_excluded_skipped']} excluded) "
              f"in {summary['elapsed_seconds']}s")
    elif args.command == "train":
        stages = pipeline.STAGES if args.stage == "all" else (args.stage,)
        for stage in stages:
            history = pipeline.run_train(cfg, stage)
            print(f"train: stage {stage} done in {history['elapsed_seconds']}s")
    elif args.command == "predict":
        out = pipeline.run_predict(cfg, args.split)
        print(f"predict: wrote {', '.join(str(p) for p in out.values())}")
    elif args.command == "fuse":
        out = pipeline.run_fuse(cfg, args.split)
        print(f"fuse: wrote {out}")
    elif args.command == "evaluate":
        report = pipeline.run_evaluate(cfg, args.split)
        print(report.render_text())
    elif args.command == "report":
        print(pipeline.run_report(cfg), end="")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _run(args)
    except _EXPECTED_ERRORS as exc:
        print(f"ctexperts: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
