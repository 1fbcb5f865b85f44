"""Dataset split bookkeeping: official counts, corrections, test-source tallies.

The challenge ships an official train/val/test table that needs three fixes
before it matches what is actually usable: the source-2 validation slice has
no positive scans (the 39 positive source-2 training scans are also counted
for validation analysis), the ``ct_scan_8`` source-0 non-COVID entry is really
67 individual samples, and ``ct_scan_0`` does not exist. Corrections are data,
not code: they live in a JSONL file and are replayed through one engine so
user-supplied corrections follow the same audit trail.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path

SPLITS = ("train", "val", "test")
SOURCES = (0, 1, 2, 3)
CLASS_NON_COVID = 0
CLASS_COVID = 1

CORRECTION_KINDS = (
    "multi_sample_expansion",
    "exclusion",
    "val_augmentation",
    "source_prediction",
)

Key = tuple[str, int | None, int | None]


class LedgerError(Exception):
    """Raised for malformed ledgers or corrections that cannot be applied."""


@dataclass(frozen=True)
class CorrectionRecord:
    kind: str
    target: str
    split: str
    source: int | None
    cls: int | None
    delta: int
    note: str = ""

    def __post_init__(self):
        if self.kind not in CORRECTION_KINDS:
            raise LedgerError(f"unknown correction kind {self.kind!r}")
        if self.split not in SPLITS:
            raise LedgerError(f"unknown split {self.split!r}")

    @property
    def key(self) -> Key:
        return (self.split, self.source, self.cls)


@dataclass
class SplitLedger:
    """Per-(split, source, class) scan counts plus correction provenance."""

    counts: dict[Key, int]
    corrections: list[CorrectionRecord] = field(default_factory=list)

    def __post_init__(self):
        for key, count in self.counts.items():
            split, source, cls = key
            if split not in SPLITS:
                raise LedgerError(f"unknown split in key {key}")
            if count < 0:
                raise LedgerError(f"negative count {count} at {key}")
            if split == "test" and cls is not None:
                raise LedgerError(f"test entries carry class=unknown, got {key}")

    def get(self, split: str, source: int | None, cls: int | None) -> int:
        return self.counts.get((split, source, cls), 0)

    def split_total(self, split: str) -> int:
        return sum(c for (s, _, _), c in self.counts.items() if s == split)

    def class_total(self, split: str, cls: int | None) -> int:
        return sum(c for (s, _, k), c in self.counts.items() if s == split and k == cls)


def official_ledger() -> SplitLedger:
    """The official challenge split, verbatim."""
    counts: dict[Key, int] = {}
    train_covid = (175, 175, 39, 175)
    train_non = (165, 165, 165, 165)
    val_covid = (43, 43, 0, 42)
    val_non = (45, 45, 45, 45)
    for src in SOURCES:
        counts[("train", src, CLASS_COVID)] = train_covid[src]
        counts[("train", src, CLASS_NON_COVID)] = train_non[src]
        counts[("val", src, CLASS_COVID)] = val_covid[src]
        counts[("val", src, CLASS_NON_COVID)] = val_non[src]
    counts[("test", None, None)] = 1488
    return SplitLedger(counts)


def apply_corrections(ledger: SplitLedger,
                      corrections: list[CorrectionRecord]) -> SplitLedger:
    """Replay count corrections, rejecting any that would go negative."""
    counts = dict(ledger.counts)
    for rec in corrections:
        updated = counts.get(rec.key, 0) + rec.delta
        if updated < 0:
            raise LedgerError(
                f"correction {rec.kind}/{rec.target} drives {rec.key} to {updated}"
            )
        counts[rec.key] = updated
    return SplitLedger(counts, corrections=list(ledger.corrections) + list(corrections))


def builtin_corrections() -> list[CorrectionRecord]:
    """The three shipped corrections that turn the official table into the revised one."""
    data = resources.files("ctexperts.data").joinpath("split_corrections.jsonl")
    return parse_corrections(data.read_text("utf8").splitlines())


def parse_corrections(lines) -> list[CorrectionRecord]:
    records = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            obj = json.loads(line)
            records.append(
                CorrectionRecord(
                    kind=obj["kind"], target=obj["target"], split=obj["split"],
                    source=obj["source"], cls=obj["class"], delta=int(obj["delta"]),
                    note=obj.get("note", ""),
                )
            )
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            raise LedgerError(f"corrections line {lineno}: {exc}") from exc
    return records


def load_corrections(path: str | Path) -> list[CorrectionRecord]:
    return parse_corrections(Path(path).read_text("utf8").splitlines())


def revised_ledger() -> SplitLedger:
    return apply_corrections(official_ledger(), builtin_corrections())


@dataclass(frozen=True)
class ScanEntry:
    scan_id: str
    split: str
    source: int | None
    cls: int | None


@dataclass(frozen=True)
class FolderManifest:
    folder_id: str
    split: str
    source: int | None
    cls: int | None
    subfolder_ids: tuple[str, ...]


def expand_multi_sample_folder(folder: FolderManifest) -> list[ScanEntry]:
    """One scan entry per subfolder, inheriting the parent's split/source/class."""
    if not folder.subfolder_ids:
        raise LedgerError(f"folder {folder.folder_id} has no subfolders")
    return [
        ScanEntry(sub, folder.split, folder.source, folder.cls)
        for sub in folder.subfolder_ids
    ]


def predicted_test_distribution(predictions, exclusions=()) -> dict[int, int]:
    """Count predicted sources over test scans, dropping excluded scan ids.

    ``predictions`` is any iterable of (scan_id, predicted_source) pairs or of
    objects carrying those attributes.
    """
    excluded = set(exclusions)
    counts = {src: 0 for src in SOURCES}
    seen: set[str] = set()
    for pred in predictions:
        if isinstance(pred, tuple):
            scan_id, src = pred
        else:
            scan_id, src = pred.scan_id, pred.predicted_source
        if scan_id in seen:
            raise LedgerError(f"duplicate prediction for scan {scan_id}")
        seen.add(scan_id)
        if scan_id in excluded:
            continue
        if src not in counts:
            raise LedgerError(f"predicted source {src} outside {SOURCES}")
        counts[src] += 1
    return counts


def scale_ledger(ledger: SplitLedger, fraction: float) -> SplitLedger:
    """Shrink every cell to ``fraction`` of its count, rounding half away from zero.

    Exact rational arithmetic avoids float-rounding surprises at .5 boundaries.
    """
    if not 0 < fraction <= 1:
        raise LedgerError(f"scale fraction must be in (0, 1], got {fraction}")
    frac = Fraction(str(fraction))
    counts = {}
    for key, count in ledger.counts.items():
        scaled = Fraction(count) * frac
        counts[key] = int(scaled + Fraction(1, 2))
    return SplitLedger(counts, corrections=list(ledger.corrections))


def ledger_as_dict(ledger: SplitLedger) -> dict:
    """JSON-friendly view used for run snapshots and hashing."""
    cells = [
        {"split": s, "source": src, "class": cls, "count": n}
        for (s, src, cls), n in sorted(
            ledger.counts.items(),
            key=lambda kv: (kv[0][0], -1 if kv[0][1] is None else kv[0][1],
                            -1 if kv[0][2] is None else kv[0][2]),
        )
    ]
    return {"cells": cells, "corrections": [vars(c) for c in ledger.corrections]}


def replace_count(ledger: SplitLedger, split: str, source: int | None,
                  cls: int | None, count: int) -> SplitLedger:
    counts = dict(ledger.counts)
    counts[(split, source, cls)] = count
    out = replace(ledger, counts=counts)
    return out
