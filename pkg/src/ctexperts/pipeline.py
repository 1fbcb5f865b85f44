"""Pipeline commands: synth, prep, train, predict, fuse, evaluate, report.

Each command reads the run configuration, does one pipeline step, and leaves
a resolved-config snapshot plus the hash of the ledger it ran under next to
its outputs. Training commands enforce their stage dependencies (the context
expert needs the slice expert's encoder; the source classifier needs the
volumetric backbone) and fail with the missing checkpoint named.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import torch

from . import checkpoint, datasets, ledger as ledger_mod
from .config import RunConfig, config_to_dict, save_config
from .ensemble import FinalPrediction, VotingError, route_and_predict, within_stage_vote
from .expert3d import load_stage1, save_stage1, train_stage1
from .expert_ctx import build_stage2b, forward_ctx, load_stage2b, save_stage2b, train_stage2b
from .expert_slice import load_stage2a, predict_stage2a, save_stage2a, train_stage2a
from .metrics import MetricsReport, compute_report
from .predictions import (ExpertPrediction, softmax,
                          read_expert_predictions, read_source_predictions,
                          write_expert_predictions, write_source_predictions)
from .rng import stream_seed
from .source_clf import build_source_clf, load_stage3, predict_source_pooled, save_stage3, train_source_clf
from .synth import generate_dataset, read_truth

STAGES = ("1", "2a", "2b", "3")
FINAL_COLUMNS = ["scan_id", "label", "p_non_covid", "p_covid", "route",
                 "predicted_source", "stage1", "stage2a", "stage2b"]
_DEP_SECTIONS = {
    "1": ("seed", "data", "prep", "stage1"),
    "2a": ("seed", "data", "prep", "stage2a"),
    "2b": ("seed", "data", "prep", "stage2a", "stage2b"),
    "3": ("seed", "data", "prep", "stage1", "stage3"),
}


class PipelineError(Exception):
    """Raised for missing inputs, missing checkpoints, or artifact mismatches."""


@dataclass(frozen=True)
class RunPaths:
    dataset: Path
    prep: Path
    checkpoints: Path
    predictions: Path
    logs: Path
    reports: Path

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "RunPaths":
        data_root = Path(cfg.paths.data_root)
        out_root = Path(cfg.paths.output_root)
        return cls(
            dataset=data_root / "dataset",
            prep=data_root / "prep",
            checkpoints=out_root / "checkpoints",
            predictions=out_root / "predictions",
            logs=out_root / "logs",
            reports=out_root / "reports",
        )

    def stage_checkpoint(self, stage: str, variant: str | None = None) -> Path:
        name = f"stage{stage}" if variant is None else f"stage{stage}_{variant}"
        return self.checkpoints / f"{name}.npz"


def resolve_ledger(cfg: RunConfig) -> ledger_mod.SplitLedger:
    """Official counts + corrections, scaled to the configured fraction."""
    base = ledger_mod.official_ledger()
    if cfg.data.corrections:
        corrections = ledger_mod.load_corrections(cfg.data.corrections)
    else:
        corrections = ledger_mod.builtin_corrections()
    revised = ledger_mod.apply_corrections(base, corrections)
    return ledger_mod.scale_ledger(revised, cfg.data.scale)


def ledger_hash(ledger: ledger_mod.SplitLedger) -> str:
    blob = json.dumps(ledger_mod.ledger_as_dict(ledger), sort_keys=True)
    return hashlib.sha256(blob.encode("utf8")).hexdigest()[:16]


def write_snapshot(cfg: RunConfig, out_dir: Path, ledger: ledger_mod.SplitLedger) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "resolved_config.yaml")
    (out_dir / "ledger_hash.txt").write_text(ledger_hash(ledger) + "\n")


def dependency_hash(cfg: RunConfig, stage: str) -> str:
    full = config_to_dict(cfg)
    view = {name: full[name] for name in _DEP_SECTIONS[stage]}
    return checkpoint.config_hash(view)


def _require(path: Path, what: str, hint: str) -> Path:
    if not path.exists():
        raise PipelineError(f"{what} not found at {path}; {hint}")
    return path


def _check_dep_hash(meta: dict, cfg: RunConfig, stage: str, name: str) -> None:
    stored = meta.get("dep_hash")
    current = dependency_hash(cfg, stage)
    if stored is not None and stored != current:
        warnings.warn(
            f"checkpoint {name} was trained under a different configuration "
            f"(stored hash {stored}, current {current}); predictions may not "
            f"match this config", stacklevel=2)


# ---------------------------------------------------------------------------
# commands


def run_synth(cfg: RunConfig) -> Path:
    paths = RunPaths.from_config(cfg)
    ledger = resolve_ledger(cfg)
    out = generate_dataset(ledger, paths.dataset, master_seed=cfg.seed,
                           base_inplane=cfg.data.base_inplane,
                           excluded_test=cfg.data.excluded_test)
    write_snapshot(cfg, paths.dataset, ledger)
    return out


def run_prep(cfg: RunConfig) -> dict:
    paths = RunPaths.from_config(cfg)
    _require(paths.dataset / "manifest.csv", "dataset manifest",
             "run the synth step first")
    summary = datasets.build_prep_cache(paths.dataset, paths.prep,
                                        cfg.prep.to_prep_config())
    write_snapshot(cfg, paths.prep, resolve_ledger(cfg))
    return summary


def _write_history(paths: RunPaths, name: str, history: dict) -> None:
    paths.logs.mkdir(parents=True, exist_ok=True)
    (paths.logs / f"{name}.json").write_text(
        json.dumps(history, indent=2, sort_keys=True, default=float))


def _train_stage1(cfg: RunConfig, paths: RunPaths) -> dict:
    tc = cfg.stage1.to_train_config(cfg.prep)
    train_items = datasets.load_stage1_items(paths.prep, "train", tc.kinds)
    if tc.augment:
        missing = [i["item_id"] for i in train_items
                   if i["kind"] == "lung" and "canonical_path" not in i]
        if missing:
            raise PipelineError(
                "rotation augmentation needs full-resolution lung volumes; "
                "re-run prep with prep.keep_canonical_lung: true "
                f"(missing for {len(missing)} items)")
    val_kind = "orig" if "orig" in tc.kinds else "lung"
    val_items = datasets.load_stage1_items(paths.prep, "val", (val_kind,))
    model, history = train_stage1(train_items, val_items, tc, cfg.seed)
    paths.checkpoints.mkdir(parents=True, exist_ok=True)
    save_stage1(model, paths.stage_checkpoint("1"), extra_meta={
        "dep_hash": dependency_hash(cfg, "1"), "seed": cfg.seed,
        "setting": tc.setting, "best_epoch": history["best_epoch"],
        "val_metrics": _best_metrics(history),
    })
    return history


def _train_stage2a(cfg: RunConfig, paths: RunPaths) -> dict:
    tc = cfg.stage2a.to_train_config(cfg.prep)
    train_items = datasets.load_stage2_items(paths.prep, "train")
    val_items = datasets.load_stage2_items(paths.prep, "val")
    encoder, head, history = train_stage2a(train_items, val_items, tc, cfg.seed)
    paths.checkpoints.mkdir(parents=True, exist_ok=True)
    save_stage2a(encoder, head, paths.stage_checkpoint("2a"), extra_meta={
        "dep_hash": dependency_hash(cfg, "2a"), "seed": cfg.seed,
        "sampling": tc.sampling, "best_epoch": history["best_epoch"],
        "val_metrics": _best_metrics(history),
    })
    return history


def _train_stage2b(cfg: RunConfig, paths: RunPaths) -> dict:
    ckpt_2a = paths.stage_checkpoint("2a")
    _require(ckpt_2a, "stage 2a checkpoint",
             "the context expert reuses the slice encoder: train stage 2a first")
    encoder, _, _ = load_stage2a(ckpt_2a)
    tc = cfg.stage2b.to_train_config()
    train_items = datasets.load_stage2_items(paths.prep, "train")
    val_items = datasets.load_stage2_items(paths.prep, "val")
    paths.checkpoints.mkdir(parents=True, exist_ok=True)
    histories = {}
    for variant in tc.variants:
        model = build_stage2b(encoder, variant, tc.context,
                              init_seed=stream_seed(cfg.seed, "stage2b", variant, "init"))
        model, history = train_stage2b(train_items, val_items, model, tc.epochs,
                                       tc.lr, tc.scans_per_batch, cfg.seed)
        save_stage2b(model, paths.stage_checkpoint("2b", variant), extra_meta={
            "dep_hash": dependency_hash(cfg, "2b"), "seed": cfg.seed,
            "best_epoch": history["best_epoch"],
            "val_metrics": _best_metrics(history),
        })
        histories[variant] = history
    return histories


def _train_stage3(cfg: RunConfig, paths: RunPaths) -> dict:
    ckpt_1 = paths.stage_checkpoint("1")
    _require(ckpt_1, "stage 1 checkpoint",
             "the source classifier reuses the volumetric backbone: train stage 1 first")
    stage1_model, _ = load_stage1(ckpt_1)
    clf = build_source_clf(stage1_model,
                           init_seed=stream_seed(cfg.seed, "stage3", "init"))
    train_items = datasets.load_source_items(paths.prep, "train", cfg.stage3.input_kind)
    val_items = datasets.load_source_items(paths.prep, "val", cfg.stage3.input_kind)
    clf, history = train_source_clf(train_items, val_items, clf, cfg.stage3.epochs,
                                    cfg.stage3.lr, cfg.stage3.batch_size, cfg.seed)
    paths.checkpoints.mkdir(parents=True, exist_ok=True)
    save_stage3(clf, paths.stage_checkpoint("3"), extra_meta={
        "dep_hash": dependency_hash(cfg, "3"), "seed": cfg.seed,
        "input_kind": cfg.stage3.input_kind, "best_epoch": history["best_epoch"],
        "val_metrics": _best_metrics(history),
    })
    return history


def _best_metrics(history: dict) -> dict:
    best = history.get("best_epoch", -1)
    for row in history.get("epochs", []):
        if row.get("epoch") == best:
            return {k: float(v) for k, v in row.items() if isinstance(v, (int, float))}
    return {}


def run_train(cfg: RunConfig, stage: str) -> dict:
    if stage not in STAGES:
        raise PipelineError(f"unknown stage {stage!r}; expected one of {STAGES}")
    paths = RunPaths.from_config(cfg)
    _require(paths.prep / datasets.PREP_MANIFEST, "prep cache",
             "run the prep step first")
    torch.set_num_threads(1)
    runner = {"1": _train_stage1, "2a": _train_stage2a,
              "2b": _train_stage2b, "3": _train_stage3}[stage]
    t0 = time.monotonic()
    history = runner(cfg, paths)
    history = {"stage": stage, "elapsed_seconds": round(time.monotonic() - t0, 3),
               **(history if isinstance(history, dict) else {})}
    _write_history(paths, f"stage{stage}", history)
    write_snapshot(cfg, paths.checkpoints, resolve_ledger(cfg))
    return history


def run_predict(cfg: RunConfig, split: str = "test") -> dict[str, Path]:
    """Per-expert and source predictions for every non-excluded scan of a split."""
    paths = RunPaths.from_config(cfg)
    _require(paths.prep / datasets.PREP_MANIFEST, "prep cache", "run the prep step first")
    torch.set_num_threads(1)

    stage1_model, meta1 = load_stage1(_require(
        paths.stage_checkpoint("1"), "stage 1 checkpoint", "train stage 1 first"))
    _check_dep_hash(meta1, cfg, "1", "stage1")
    enc, head, meta2a = load_stage2a(_require(
        paths.stage_checkpoint("2a"), "stage 2a checkpoint", "train stage 2a first"))
    _check_dep_hash(meta2a, cfg, "2a", "stage2a")
    ctx_models = {}
    for variant in cfg.stage2b.variants:
        model, meta2b = load_stage2b(_require(
            paths.stage_checkpoint("2b", variant), f"stage 2b checkpoint ({variant})",
            "train stage 2b first"))
        _check_dep_hash(meta2b, cfg, "2b", f"stage2b_{variant}")
        ctx_models[variant] = model
    clf, meta3 = load_stage3(_require(
        paths.stage_checkpoint("3"), "stage 3 checkpoint", "train stage 3 first"))
    _check_dep_hash(meta3, cfg, "3", "stage3")

    stage1_kinds = cfg.stage1.to_train_config(cfg.prep).kinds
    source_kind = meta3.get("input_kind", cfg.stage3.input_kind)
    stage1_rows, stage2a_rows, stage2b_rows, source_rows = [], [], [], []

    stage1_model.eval()
    for row, arrays in datasets.iter_split(paths.prep, split):
        for kind in stage1_kinds:
            with torch.no_grad():
                logits = stage1_model(
                    torch.from_numpy(arrays[kind]).unsqueeze(0).unsqueeze(0))[0].numpy()
            probs = softmax(logits)
            stage1_rows.append((row.split, ExpertPrediction(
                row.scan_id, (float(probs[0]), float(probs[1])),
                expert_id="stage1", variant_id=kind)))
        stage2a_rows.append((row.split,
                             predict_stage2a(enc, head, arrays["stack"], row.scan_id)))
        for model in ctx_models.values():
            stage2b_rows.append((row.split, forward_ctx(model, arrays["stack"], row.scan_id)))
        source_rows.append((row.split,
                            predict_source_pooled(clf, arrays[source_kind], row.scan_id)))

    if not stage2a_rows:
        raise PipelineError(f"no cached scans for split {split!r}")
    paths.predictions.mkdir(parents=True, exist_ok=True)
    out = {
        "stage1": paths.predictions / f"{split}_stage1.csv",
        "stage2a": paths.predictions / f"{split}_stage2a.csv",
        "stage2b": paths.predictions / f"{split}_stage2b.csv",
        "source": paths.predictions / f"{split}_source.csv",
    }
    write_expert_predictions(out["stage1"], stage1_rows)
    write_expert_predictions(out["stage2a"], stage2a_rows)
    write_expert_predictions(out["stage2b"], stage2b_rows)
    write_source_predictions(out["source"], source_rows)
    write_snapshot(cfg, paths.predictions, resolve_ledger(cfg))
    return out


def write_final_predictions(path: Path, finals: list[FinalPrediction]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FINAL_COLUMNS)
        for f in sorted(finals, key=lambda f: f.scan_id):
            writer.writerow([
                f.scan_id, f.label, f"{f.probs[0]:.8f}", f"{f.probs[1]:.8f}",
                f.route, "" if f.predicted_source is None else f.predicted_source,
                f.stage_labels.get("stage1", ""), f.stage_labels.get("stage2a", ""),
                f.stage_labels.get("stage2b", ""),
            ])


def read_final_predictions(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != FINAL_COLUMNS:
            raise PipelineError(f"{path}: unexpected columns {reader.fieldnames}")
        return [dict(rec) for rec in reader]


def run_fuse(cfg: RunConfig, split: str = "test") -> Path:
    """Within-stage votes, then source-aware routing, to one final file."""
    paths = RunPaths.from_config(cfg)
    vote_cfg = cfg.vote.to_vote_config()

    by_stage: dict[str, dict[str, list[ExpertPrediction]]] = {}
    for stage in ("stage1", "stage2a", "stage2b"):
        path = _require(paths.predictions / f"{split}_{stage}.csv",
                        f"{stage} predictions", "run the predict step first")
        grouped: dict[str, list[ExpertPrediction]] = {}
        for _, pred in read_expert_predictions(path):
            grouped.setdefault(pred.scan_id, []).append(pred)
        by_stage[stage] = grouped
    source_path = _require(paths.predictions / f"{split}_source.csv",
                           "source predictions", "run the predict step first")
    sources = {pred.scan_id: pred for _, pred in read_source_predictions(source_path)}

    scan_sets = [set(g) for g in by_stage.values()] + [set(sources)]
    if any(s != scan_sets[0] for s in scan_sets[1:]):
        detail = {stage: len(g) for stage, g in by_stage.items()}
        raise PipelineError(f"prediction files disagree on scan ids "
                            f"(counts {detail}, source {len(sources)})")

    finals = []
    for scan_id in sorted(scan_sets[0]):
        stage_preds = {
            stage: within_stage_vote(by_stage[stage][scan_id],
                                     vote_cfg.within_stage_rule).prediction
            for stage in ("stage1", "stage2a", "stage2b")
        }
        try:
            finals.append(route_and_predict(stage_preds, sources[scan_id], vote_cfg))
        except VotingError as exc:
            raise PipelineError(f"fusing scan {scan_id!r}: {exc}") from exc

    paths.predictions.mkdir(parents=True, exist_ok=True)
    out = paths.predictions / f"{split}_final.csv"
    write_final_predictions(out, finals)
    return out


def run_evaluate(cfg: RunConfig, split: str = "test") -> MetricsReport:
    """Score the fused predictions against the generator's hidden truth."""
    paths = RunPaths.from_config(cfg)
    final_path = _require(paths.predictions / f"{split}_final.csv",
                          "final predictions", "run the fuse step first")
    rows = read_final_predictions(final_path)

    labels, preds, scores, sources = [], [], [], []
    if split == "test":
        truth = read_truth(_require(paths.dataset / "truth.csv", "truth table",
                                    "run the synth step first"))
        for rec in rows:
            if rec["scan_id"] not in truth:
                raise PipelineError(f"scan {rec['scan_id']!r} missing from the truth table")
            src, label = truth[rec["scan_id"]]
            labels.append(label)
            sources.append(src)
            preds.append(int(rec["label"]))
            scores.append(float(rec["p_covid"]))
    else:
        manifest = {r.scan_id: r for r in datasets.read_prep_manifest(paths.prep)}
        for rec in rows:
            row = manifest.get(rec["scan_id"])
            if row is None or row.label is None:
                raise PipelineError(f"scan {rec['scan_id']!r} has no ground-truth label")
            labels.append(row.label)
            sources.append(row.source)
            preds.append(int(rec["label"]))
            scores.append(float(rec["p_covid"]))

    report = compute_report(labels, preds, scores, sources)
    paths.reports.mkdir(parents=True, exist_ok=True)
    (paths.reports / f"evaluate_{split}.json").write_text(
        json.dumps(report.as_dict(), indent=2, sort_keys=True))
    (paths.reports / f"evaluate_{split}.txt").write_text(report.render_text() + "\n")
    write_snapshot(cfg, paths.reports, resolve_ledger(cfg))
    return report


def run_report(cfg: RunConfig) -> str:
    """Assemble a text run report from whatever artifacts exist."""
    paths = RunPaths.from_config(cfg)
    ledger = resolve_ledger(cfg)
    lines = ["run report", "==========", ""]
    lines.append(f"ledger hash {ledger_hash(ledger)}")
    for split in ledger_mod.SPLITS:
        total = sum(n for (s, _, _), n in ledger.counts.items() if s == split)
        lines.append(f"  {split} scans {total}")

    prep_summary = paths.prep / datasets.PREP_SUMMARY
    if prep_summary.exists():
        summary = json.loads(prep_summary.read_text())
        lines += ["", f"prep: {summary['n_scans']} scans cached, "
                      f"{summary['n_trimmed']} trimmed, "
                      f"{summary['n_excluded_skipped']} excluded"]

    for stage in STAGES:
        log_path = paths.logs / f"stage{stage}.json"
        if not log_path.exists():
            continue
        history = json.loads(log_path.read_text())
        best = history.get("best_epoch")
        if best is None:  # per-variant histories
            for variant, sub in history.items():
                if isinstance(sub, dict) and "best_epoch" in sub:
                    lines.append(f"stage {stage} [{variant}]: best epoch {sub['best_epoch']}")
        else:
            lines.append(f"stage {stage}: best epoch {best}")

    eval_path = paths.reports / "evaluate_test.json"
    if eval_path.exists():
        metrics = json.loads(eval_path.read_text())
        lines += ["", "test metrics"]
        lines += [f"  {k} {metrics[k]:.4f}" for k in sorted(metrics)]

    source_path = paths.predictions / "test_source.csv"
    if source_path.exists():
        preds = [(p.scan_id, p.predicted_source)
                 for _, p in read_source_predictions(source_path)]
        dist = ledger_mod.predicted_test_distribution(preds)
        lines += ["", "predicted test sources"]
        lines += [f"  S{src} {n}" for src, n in sorted(dist.items())]

    text = "\n".join(lines) + "\n"
    paths.reports.mkdir(parents=True, exist_ok=True)
    (paths.reports / "report.txt").write_text(text)
    return text


__all__ = [
    "FINAL_COLUMNS", "PipelineError", "RunPaths", "STAGES", "dependency_hash",
    "ledger_hash", "read_final_predictions", "resolve_ledger", "run_evaluate",
    "run_fuse", "run_predict", "run_prep", "run_report", "run_synth",
    "run_train", "write_final_predictions", "write_snapshot",
]
