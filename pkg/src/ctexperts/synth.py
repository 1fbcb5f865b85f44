"""Synthetic four-source phantom dataset.

Each source has its own appearance signature (intensity bias, noise level,
slice-count range, field of view, background style) so that a source
classifier has real signal to learn, and the slice-count ranges straddle the
150-slice trim threshold so both trim branches run on default data. Scans
contain two bright ellipsoidal "lung" regions; positive scans additionally
get soft lesion blobs placed inside the lungs. Source 0 is deliberately the
easiest (low noise, high contrast) so the volumetric expert can approach a
perfect score there.

Generation is deterministic per (master seed, scan id) and embarrassingly
parallel across scans.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import storage
from .ledger import SplitLedger
from .prep import ScanVolume
from .rng import substream

BACKGROUND_STYLES = ("plain", "dark-border", "bright-ring", "textured")

LUNG_BASE = 0.55
DEFAULT_TEST_SOURCE_WEIGHTS = (548, 314, 245, 380)


class SynthError(Exception):
    """Raised for invalid generator settings or failed dataset writes."""


@dataclass(frozen=True)
class SourceProfile:
    source_id: int
    intensity_bias: float
    noise_sigma: float
    slice_count_range: tuple[int, int]
    field_of_view_scale: float
    background_style: str

    def __post_init__(self):
        if self.slice_count_range[0] < 8:
            raise SynthError(f"slice_count_range min must be >= 8, got {self.slice_count_range}")
        if self.slice_count_range[0] > self.slice_count_range[1]:
            raise SynthError(f"bad slice_count_range {self.slice_count_range}")
        if self.noise_sigma < 0:
            raise SynthError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.background_style not in BACKGROUND_STYLES:
            raise SynthError(f"unknown background style {self.background_style!r}")


@dataclass(frozen=True)
class LesionSpec:
    count_range: tuple[int, int] = (3, 5)
    radius_range: tuple[float, float] = (4.0, 7.0)
    intensity_delta: float = 0.4

    def __post_init__(self):
        if self.count_range[0] < 1 or self.count_range[0] > self.count_range[1]:
            raise SynthError(f"bad lesion count_range {self.count_range}")
        if self.radius_range[0] <= 0 or self.radius_range[0] > self.radius_range[1]:
            raise SynthError(f"bad lesion radius_range {self.radius_range}")


DEFAULT_PROFILES = (
    SourceProfile(0, intensity_bias=0.20, noise_sigma=0.015,
                  slice_count_range=(24, 40), field_of_view_scale=0.90,
                  background_style="plain"),
    SourceProfile(1, intensity_bias=-0.05, noise_sigma=0.06,
                  slice_count_range=(156, 192), field_of_view_scale=1.15,
                  background_style="dark-border"),
    SourceProfile(2, intensity_bias=0.08, noise_sigma=0.04,
                  slice_count_range=(48, 72), field_of_view_scale=1.00,
                  background_style="bright-ring"),
    SourceProfile(3, intensity_bias=0.00, noise_sigma=0.05,
                  slice_count_range=(140, 156), field_of_view_scale=1.05,
                  background_style="textured"),
)

DEFAULT_LESIONS = LesionSpec()


def _lung_geometry(shape: tuple[int, int, int]):
    """Centers and semi-axes of the two lung ellipsoids for a given shape."""
    s, r, c = shape
    semi = (0.40 * s, 0.32 * r, 0.15 * c)
    centers = ((0.50 * s, 0.55 * r, 0.30 * c), (0.50 * s, 0.55 * r, 0.70 * c))
    return centers, semi


def _ellipsoid_mask(shape, center, semi) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    d = (
        ((zz - center[0]) / semi[0]) ** 2
        + ((yy - center[1]) / semi[1]) ** 2
        + ((xx - center[2]) / semi[2]) ** 2
    )
    return d <= 1.0


def _background(shape, style: str, rng: np.random.Generator) -> np.ndarray:
    s, r, c = shape
    vol = np.zeros(shape, dtype=np.float32)
    if style == "plain":
        vol += 0.02
    elif style == "dark-border":
        m_r, m_c = int(0.12 * r), int(0.12 * c)
        vol[:, m_r:r - m_r, m_c:c - m_c] = 0.10
    elif style == "bright-ring":
        yy, xx = np.ogrid[:r, :c]
        rad = np.sqrt((yy - r / 2.0) ** 2 + (xx - c / 2.0) ** 2)
        ring = (rad >= 0.45 * min(r, c)) & (rad <= 0.45 * min(r, c) + 2.0)
        vol[:, ring] = 0.50
    elif style == "textured":
        coarse = rng.normal(0.0, 1.0, size=(max(2, s // 8), max(2, r // 8), max(2, c // 8)))
        reps = (int(np.ceil(s / coarse.shape[0])), int(np.ceil(r / coarse.shape[1])),
                int(np.ceil(c / coarse.shape[2])))
        field = np.kron(coarse, np.ones(reps))[:s, :r, :c]
        vol += 0.05 + 0.03 * field.astype(np.float32)
    return vol


def generate_scan(profile: SourceProfile, label: int, lesions: LesionSpec,
                  rng: np.random.Generator, base_inplane: int = 112,
                  scan_id: str = "") -> ScanVolume:
    """One phantom scan; positives carry lesion blobs inside the lung regions.

    The draw order is fixed: slice count, background, lung tissue, then
    lesions. A negative scan generated from the same stream therefore matches
    the positive one voxel-for-voxel outside the lesion bumps.
    """
    if label not in (0, 1):
        raise SynthError(f"label must be 0 or 1, got {label}")
    n_slices = int(rng.integers(profile.slice_count_range[0],
                                profile.slice_count_range[1] + 1))
    inplane = int(round(base_inplane * profile.field_of_view_scale))
    shape = (n_slices, inplane, inplane)

    vol = _background(shape, profile.background_style, rng)
    centers, semi = _lung_geometry(shape)
    lung_masks = [_ellipsoid_mask(shape, ctr, semi) for ctr in centers]
    lung_level = LUNG_BASE + profile.intensity_bias
    noise = rng.normal(0.0, profile.noise_sigma, size=shape).astype(np.float32)
    for mask in lung_masks:
        vol[mask] = lung_level + noise[mask]

    placed = []
    if label == 1:
        count = int(rng.integers(lesions.count_range[0], lesions.count_range[1] + 1))
        for _ in range(count):
            side = int(rng.integers(0, 2))
            ctr = centers[side]
            # uniform direction, radius shrunk so the blob core stays inside the lung
            u = rng.normal(size=3)
            u /= max(np.linalg.norm(u), 1e-9)
            t = rng.uniform(0.0, 0.6)
            cz = ctr[0] + u[0] * t * semi[0]
            cy = ctr[1] + u[1] * t * semi[1]
            cx = ctr[2] + u[2] * t * semi[2]
            radius = float(rng.uniform(lesions.radius_range[0], lesions.radius_range[1]))
            _add_blob(vol, (cz, cy, cx), radius, lesions.intensity_delta)
            placed.append({"center": (float(cz), float(cy), float(cx)), "radius": radius})

    vol = np.clip(vol, 0.0, 1.5).astype(np.float32)
    meta = {
        "profile": profile.source_id,
        "background_style": profile.background_style,
        "lesions": placed,
        "lung_centers": centers,
        "lung_semi_axes": semi,
    }
    return ScanVolume(vol, scan_id=scan_id, source=profile.source_id, label=label, meta=meta)


def _add_blob(vol: np.ndarray, center, radius: float, delta: float) -> None:
    """Additive Gaussian bump evaluated on a local box around the center."""
    sigma = radius / 1.5
    reach = int(np.ceil(2.5 * sigma))
    lo = [max(0, int(np.floor(c)) - reach) for c in center]
    hi = [min(dim, int(np.ceil(c)) + reach + 1) for c, dim in zip(center, vol.shape)]
    zz, yy, xx = np.ogrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    d2 = (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
    bump = delta * np.exp(-d2 / (2.0 * sigma ** 2))
    vol[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] += bump.astype(np.float32)


def _split_test_sources(n: int, weights) -> list[int]:
    """Largest-remainder apportionment of n test scans over the four sources."""
    weights = np.asarray(weights, dtype=np.float64)
    shares = weights / weights.sum() * n
    counts = np.floor(shares).astype(int)
    rem = n - counts.sum()
    order = np.argsort(-(shares - counts))
    for i in range(rem):
        counts[order[i % 4]] += 1
    out = []
    for src, cnt in enumerate(counts):
        out.extend([src] * int(cnt))
    return out


def generate_dataset(ledger: SplitLedger, out_dir: str | Path, master_seed: int,
                     profiles=DEFAULT_PROFILES, lesions: LesionSpec = DEFAULT_LESIONS,
                     base_inplane: int = 112, excluded_test: int = 1,
                     test_source_weights=DEFAULT_TEST_SOURCE_WEIGHTS) -> Path:
    """Write volumes + manifest matching the ledger counts exactly.

    Labeled splits emit one scan per ledger cell count. Test-split scans get
    hidden annotations: sources follow ``test_source_weights`` and labels
    alternate, recorded only in ``truth.csv``. The last ``excluded_test`` test
    scans are flagged excluded in the manifest, mirroring ambiguous scans
    dropped from downstream inference.
    """
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    by_source = {p.source_id: p for p in profiles}

    rows: list[storage.ManifestRow] = []
    truth: list[tuple[str, int, int]] = []

    def _write(scan: ScanVolume, rel: str) -> None:
        try:
            storage.write_volume(out_dir / rel, scan.voxels)
        except OSError as exc:
            raise SynthError(f"failed writing volume {out_dir / rel}: {exc}") from exc

    for (split, source, cls), count in sorted(
        ledger.counts.items(),
        key=lambda kv: (kv[0][0], -1 if kv[0][1] is None else kv[0][1],
                        -1 if kv[0][2] is None else kv[0][2]),
    ):
        if split == "test":
            sources = _split_test_sources(count, test_source_weights)
            for i in range(count):
                scan_id = f"test_{i:04d}"
                src = sources[i]
                label = i % 2
                rng = substream(master_seed, "synth", scan_id)
                scan = generate_scan(by_source[src], label, lesions, rng,
                                     base_inplane=base_inplane, scan_id=scan_id)
                rel = f"volumes/{scan_id}.ctv"
                _write(scan, rel)
                excluded = i >= count - excluded_test
                rows.append(storage.ManifestRow(scan_id, "test", None, None, rel, excluded))
                truth.append((scan_id, src, label))
        else:
            for i in range(count):
                scan_id = f"{split}_s{source}_c{cls}_{i:04d}"
                rng = substream(master_seed, "synth", scan_id)
                scan = generate_scan(by_source[source], cls, lesions, rng,
                                     base_inplane=base_inplane, scan_id=scan_id)
                rel = f"volumes/{scan_id}.ctv"
                _write(scan, rel)
                rows.append(storage.ManifestRow(scan_id, split, source, cls, rel, False))

    manifest_path = out_dir / "manifest.csv"
    storage.write_manifest(manifest_path, rows)
    with open(out_dir / "truth.csv", "w") as fh:
        fh.write("scan_id,true_source,true_label\n")
        for scan_id, src, label in truth:
            fh.write(f"{scan_id},{src},{label}\n")
    with open(out_dir / "generation.json", "w") as fh:
        json.dump(
            {
                "master_seed": master_seed,
                "base_inplane": base_inplane,
                "excluded_test": excluded_test,
                "profiles": [vars(p) for p in profiles],
                "lesions": vars(lesions),
            },
            fh, indent=2, default=list,
        )
    return manifest_path


def read_truth(path: str | Path) -> dict[str, tuple[int, int]]:
    """scan_id -> (true_source, true_label) for hidden test annotations."""
    out = {}
    lines = Path(path).read_text().splitlines()
    for line in lines[1:]:
        scan_id, src, label = line.split(",")
        out[scan_id] = (int(src), int(label))
    return out
