"""On-disk formats: the CTV1 volume container and the dataset manifest.

Volume container layout (little-endian):
    bytes 0..3    magic ``CTV1``
    bytes 4..15   three uint32 dims (slices, rows, cols)
    bytes 16..    row-major float32 voxels, ``slices*rows*cols`` values

The manifest is a CSV with a required header row joining scan ids to split,
source, label, relative volume path and an exclusion flag. Unknown source or
label (hidden test annotations) is spelled ``unknown``.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"CTV1"
HEADER = struct.Struct("<4sIII")

MANIFEST_COLUMNS = ["scan_id", "split", "source", "label", "path", "excluded"]
UNKNOWN = "unknown"


class StorageError(Exception):
    """Raised for malformed volume containers or manifests."""


def write_volume(path: str | Path, voxels: np.ndarray) -> None:
    voxels = np.asarray(voxels, dtype=np.float32)
    if voxels.ndim != 3:
        raise StorageError(f"volume must be 3D, got shape {voxels.shape}")
    if not np.isfinite(voxels).all():
        raise StorageError(f"refusing to write non-finite voxels to {path}")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, *voxels.shape))
        fh.write(np.ascontiguousarray(voxels, dtype="<f4").tobytes())


def read_volume(path: str | Path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise StorageError(f"{path}: truncated header")
    magic, ns, nr, nc = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise StorageError(f"{path}: bad magic {magic!r}")
    expected = HEADER.size + 4 * ns * nr * nc
    if len(raw) != expected:
        raise StorageError(f"{path}: expected {expected} bytes, found {len(raw)}")
    voxels = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(ns, nr, nc)
    return np.array(voxels, dtype=np.float32)


@dataclass
class ManifestRow:
    scan_id: str
    split: str
    source: int | None
    label: int | None
    path: str
    excluded: bool = False


def _fmt(value: int | None) -> str:
    return UNKNOWN if value is None else str(value)


def _parse(value: str) -> int | None:
    return None if value == UNKNOWN else int(value)


def write_manifest(path: str | Path, rows: list[ManifestRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for row in rows:
            writer.writerow(
                [row.scan_id, row.split, _fmt(row.source), _fmt(row.label),
                 row.path, int(row.excluded)]
            )


def read_manifest(path: str | Path) -> list[ManifestRow]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_COLUMNS:
            raise StorageError(f"{path}: bad manifest header {header}")
        rows = []
        seen: set[str] = set()
        for rec in reader:
            if len(rec) != len(MANIFEST_COLUMNS):
                raise StorageError(f"{path}: malformed row {rec}")
            scan_id, split, source, label, vol_path, excluded = rec
            if scan_id in seen:
                raise StorageError(f"{path}: duplicate scan_id {scan_id}")
            seen.add(scan_id)
            rows.append(
                ManifestRow(scan_id, split, _parse(source), _parse(label),
                            vol_path, bool(int(excluded)))
            )
    return rows
