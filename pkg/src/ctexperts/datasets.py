"""Preprocessing cache: canonicalize every scan once, train from the cache.

For each scan the prep pass stores the stem-pooled tensors each stage trains
on (pooling inside the models is fixed block-mean, so caching its output is
exact): the pooled canonical volume of the original scan, the pooled
canonical volume of the lung-extracted scan, and the pooled canonical slice
stack. Full-resolution lung volumes can optionally be kept on disk for the
rotation-augmented training setting, which re-augments at canonical
resolution every epoch.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import storage
from .prep import (PrepError, ScanVolume, canonicalize_2d, canonicalize_3d,
                   extract_lung, pool_volume, trim_slices, validate_scan)

PREP_MANIFEST = "prep_manifest.csv"
PREP_SUMMARY = "prep_summary.json"
PREP_COLUMNS = ["scan_id", "split", "source", "label", "item_path", "canonical_path"]
STACK_SOURCES = ("orig", "lung")
STAGE1_KINDS = ("orig", "lung")


@dataclass(frozen=True)
class PrepConfig:
    trim_threshold: int = 150
    trim_fraction: float = 0.15
    lung_components: int = 2
    pool3d: tuple[int, int, int] = (4, 4, 4)
    pool2d: tuple[int, int] = (4, 4)
    stack_source: str = "orig"
    keep_canonical_lung: bool = False

    def __post_init__(self):
        if self.stack_source not in STACK_SOURCES:
            raise ValueError(f"stack_source must be one of {STACK_SOURCES}")

    def as_dict(self) -> dict:
        return {
            "trim_threshold": self.trim_threshold,
            "trim_fraction": self.trim_fraction,
            "lung_components": self.lung_components,
            "pool3d": list(self.pool3d),
            "pool2d": list(self.pool2d),
            "stack_source": self.stack_source,
            "keep_canonical_lung": self.keep_canonical_lung,
        }


@dataclass(frozen=True)
class PrepRow:
    scan_id: str
    split: str
    source: int | None
    label: int | None
    item_path: str
    canonical_path: str = ""


def prep_scan(scan: ScanVolume, config: PrepConfig = PrepConfig()) -> dict:
    """Run the full preprocessing chain on one raw scan.

    Returns pooled ``orig``/``lung`` volumes, the pooled slice ``stack``,
    the full-resolution canonical lung volume and a metadata dict.
    """
    validate_scan(scan)
    meta: dict = {"n_slices_raw": int(scan.voxels.shape[0])}
    trimmed = trim_slices(scan, config.trim_threshold, config.trim_fraction)
    meta["trimmed_per_end"] = trimmed.meta.get("trimmed_per_end", 0)

    lung = extract_lung(trimmed, keep_components=config.lung_components)
    meta["lung_bbox"] = lung.meta.get("lung_bbox")
    meta["lung_warning"] = bool(lung.meta.get("lung_warning", False))

    canon_orig = canonicalize_3d(trimmed)
    canon_lung = canonicalize_3d(lung)
    stack_scan = trimmed if config.stack_source == "orig" else lung
    stack = canonicalize_2d(stack_scan)

    return {
        "orig": pool_volume(canon_orig.voxels, config.pool3d),
        "lung": pool_volume(canon_lung.voxels, config.pool3d),
        "stack": pool_volume(stack.slices, (1, *config.pool2d)),
        "canonical_lung": canon_lung,
        "meta": meta,
    }


def build_prep_cache(dataset_dir: str | Path, cache_dir: str | Path,
                     config: PrepConfig = PrepConfig(),
                     splits: Sequence[str] | None = None) -> dict:
    """Preprocess every non-excluded scan in a generated dataset.

    Writes one ``.npz`` per scan plus a manifest and a summary; returns the
    summary. Excluded scans are skipped and reported.
    """
    dataset_dir = Path(dataset_dir)
    cache_dir = Path(cache_dir)
    (cache_dir / "items").mkdir(parents=True, exist_ok=True)
    if config.keep_canonical_lung:
        (cache_dir / "canonical").mkdir(exist_ok=True)

    rows = storage.read_manifest(dataset_dir / "manifest.csv")
    if splits is not None:
        rows = [r for r in rows if r.split in splits]
    t0 = time.monotonic()
    out_rows: list[PrepRow] = []
    skipped, lung_warnings, trimmed_count = [], 0, 0

    for row in sorted(rows, key=lambda r: r.scan_id):
        if row.excluded:
            skipped.append(row.scan_id)
            continue
        vox = storage.read_volume(dataset_dir / row.path)
        scan = ScanVolume(vox, scan_id=row.scan_id, source=row.source, label=row.label)
        arts = prep_scan(scan, config)
        lung_warnings += int(arts["meta"]["lung_warning"])
        trimmed_count += int(arts["meta"]["trimmed_per_end"] > 0)

        item_rel = f"items/{row.scan_id}.npz"
        np.savez(cache_dir / item_rel, orig=arts["orig"], lung=arts["lung"],
                 stack=arts["stack"])
        canonical_rel = ""
        if config.keep_canonical_lung:
            canonical_rel = f"canonical/{row.scan_id}.ctv"
            storage.write_volume(cache_dir / canonical_rel, arts["canonical_lung"].voxels)
        out_rows.append(PrepRow(row.scan_id, row.split, row.source, row.label,
                                item_rel, canonical_rel))

    _write_prep_manifest(cache_dir / PREP_MANIFEST, out_rows)
    summary = {
        "n_scans": len(out_rows),
        "n_excluded_skipped": len(skipped),
        "excluded": skipped,
        "n_trimmed": trimmed_count,
        "n_lung_warnings": lung_warnings,
        "config": config.as_dict(),
        "elapsed_seconds": round(time.monotonic() - t0, 3),
    }
    (cache_dir / PREP_SUMMARY).write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def _write_prep_manifest(path: Path, rows: Sequence[PrepRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREP_COLUMNS)
        for r in sorted(rows, key=lambda r: r.scan_id):
            writer.writerow([
                r.scan_id, r.split,
                storage.UNKNOWN if r.source is None else r.source,
                storage.UNKNOWN if r.label is None else r.label,
                r.item_path, r.canonical_path,
            ])


def read_prep_manifest(cache_dir: str | Path) -> list[PrepRow]:
    path = Path(cache_dir) / PREP_MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no prep cache at {path}; run the prep step first")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != PREP_COLUMNS:
            raise PrepError(f"{path}: unexpected columns {reader.fieldnames}")
        for rec in reader:
            rows.append(PrepRow(
                rec["scan_id"], rec["split"],
                None if rec["source"] == storage.UNKNOWN else int(rec["source"]),
                None if rec["label"] == storage.UNKNOWN else int(rec["label"]),
                rec["item_path"], rec["canonical_path"],
            ))
    return rows


def _load_item(cache_dir: Path, row: PrepRow) -> dict[str, np.ndarray]:
    with np.load(cache_dir / row.item_path) as npz:
        return {k: npz[k] for k in ("orig", "lung", "stack")}


def iter_split(cache_dir: str | Path, split: str) -> Iterator[tuple[PrepRow, dict]]:
    """Yield (row, arrays) for every cached scan of a split, sorted by id."""
    cache_dir = Path(cache_dir)
    for row in read_prep_manifest(cache_dir):
        if row.split == split:
            yield row, _load_item(cache_dir, row)


def _require_label(row: PrepRow) -> int:
    if row.label is None:
        raise PrepError(f"scan {row.scan_id!r} has no class label; "
                        "labeled splits are required for training")
    return row.label


def load_stage1_items(cache_dir: str | Path, split: str,
                      kinds: Sequence[str] = STAGE1_KINDS) -> list[dict]:
    """One training item per scan per input kind (``orig`` and/or ``lung``)."""
    for kind in kinds:
        if kind not in STAGE1_KINDS:
            raise ValueError(f"unknown input kind {kind!r}; expected subset of {STAGE1_KINDS}")
    cache_dir = Path(cache_dir)
    items = []
    for row, arrays in iter_split(cache_dir, split):
        for kind in kinds:
            item = {
                "item_id": f"{row.scan_id}:{kind}",
                "scan_id": row.scan_id,
                "kind": kind,
                "label": _require_label(row),
                "source": row.source,
                "x": arrays[kind],
            }
            if kind == "lung" and row.canonical_path:
                item["canonical_path"] = cache_dir / row.canonical_path
            items.append(item)
    return items


def load_stage2_items(cache_dir: str | Path, split: str) -> list[dict]:
    """One item per scan carrying the pooled canonical slice stack."""
    return [
        {
            "item_id": row.scan_id,
            "scan_id": row.scan_id,
            "label": _require_label(row),
            "source": row.source,
            "stack": arrays["stack"],
        }
        for row, arrays in iter_split(cache_dir, split)
    ]


def load_source_items(cache_dir: str | Path, split: str, kind: str = "orig") -> list[dict]:
    """One item per scan for source classification (source label required)."""
    if kind not in STAGE1_KINDS:
        raise ValueError(f"unknown input kind {kind!r}")
    items = []
    for row, arrays in iter_split(cache_dir, split):
        if row.source is None:
            raise PrepError(f"scan {row.scan_id!r} has no source label")
        items.append({
            "item_id": row.scan_id,
            "scan_id": row.scan_id,
            "source": row.source,
            "x": arrays[kind],
        })
    return items


__all__ = [
    "PrepConfig", "PrepRow", "STAGE1_KINDS", "STACK_SOURCES", "build_prep_cache",
    "iter_split", "load_source_items", "load_stage1_items", "load_stage2_items",
    "prep_scan", "read_prep_manifest",
]
