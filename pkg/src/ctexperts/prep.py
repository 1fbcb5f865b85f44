"""Deterministic scan preprocessing for both model branches.

Pipeline order is trim -> (optional lung extraction) -> canonicalize. The 3D
branch canonical shape is 128x256x256 and the 2D branch shape is 24x448x448,
both min-max normalized to [0, 1]. Scans with more than 150 slices lose 15%
of slices from each end first, which drops unstable peripheral slices.

Augmentation (crop + in-plane rotation + resize back) draws one parameter set
per scan and applies it to every slice of that scan; an optional call log
records the per-slice applications so tests can audit scan consistency.

All functions are pure in (input, params/seed) and safe to run concurrently
on distinct scans.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np
from scipy import ndimage

CANONICAL_3D = (128, 256, 256)
CANONICAL_2D = (24, 448, 448)


class PrepError(Exception):
    """Raised for invalid scans or preprocessing parameters."""


@dataclass
class ScanVolume:
    """Raw scan: (slice, row, col) intensities plus bookkeeping metadata."""

    voxels: np.ndarray
    scan_id: str = ""
    source: int | None = None
    label: int | None = None
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CanonicalVolume3D:
    """128x256x256 volume with intensities in [0, 1]."""

    voxels: np.ndarray

    def __post_init__(self):
        _check_canonical(self.voxels, CANONICAL_3D)


@dataclass(frozen=True)
class SliceStack2D:
    """24x448x448 slice stack with intensities in [0, 1]."""

    slices: np.ndarray

    def __post_init__(self):
        _check_canonical(self.slices, CANONICAL_2D)


def _check_canonical(arr: np.ndarray, shape: tuple[int, int, int]) -> None:
    if arr.shape != shape:
        raise PrepError(f"expected shape {shape}, got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0 + 1e-6:
        raise PrepError("canonical intensities must lie in [0, 1]")


def validate_scan(scan: ScanVolume) -> None:
    vox = scan.voxels
    if vox.ndim != 3 or vox.shape[0] < 1:
        raise PrepError(f"scan {scan.scan_id!r}: need a non-empty 3D array, got {vox.shape}")
    if not np.isfinite(vox).all():
        raise PrepError(f"scan {scan.scan_id!r}: non-finite intensities")


# ---------------------------------------------------------------------------
# slice trimming


def trim_slices(scan: ScanVolume, slice_threshold: int = 150,
                trim_fraction: float = 0.15) -> ScanVolume:
    """Drop floor(trim_fraction * S) slices from each end when S > slice_threshold.

    Scans at or under the threshold pass through unchanged; slice order is
    preserved. floor rounding never over-trims.
    """
    validate_scan(scan)
    if not 0.0 <= trim_fraction < 0.5:
        raise PrepError(f"trim_fraction must be in [0, 0.5), got {trim_fraction}")
    n = scan.voxels.shape[0]
    if n <= slice_threshold:
        return scan
    cut = int(np.floor(trim_fraction * n))
    remaining = n - 2 * cut
    if remaining <= 0:
        raise PrepError(f"scan {scan.scan_id!r}: trimming {cut} per end empties {n} slices")
    if cut == 0:
        return scan
    meta = dict(scan.meta)
    meta["trimmed_per_end"] = cut
    return replace(scan, voxels=scan.voxels[cut:n - cut], meta=meta)


# ---------------------------------------------------------------------------
# lung / body extraction


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Between-class-variance threshold on the intensity histogram."""
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return hi
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    hist = hist.astype(np.float64)
    centers = (edges[:-1] + edges[1:]) / 2.0
    weight1 = np.cumsum(hist)
    weight2 = weight1[-1] - weight1
    csum = np.cumsum(hist * centers)
    mean1 = np.divide(csum, weight1, out=np.zeros_like(csum), where=weight1 > 0)
    mean2 = np.divide(csum[-1] - csum, weight2, out=np.zeros_like(csum), where=weight2 > 0)
    between = weight1 * weight2 * (mean1 - mean2) ** 2
    return float(centers[int(np.argmax(between))])


def extract_lung(scan: ScanVolume, threshold: float | None = None,
                 keep_components: int = 2) -> ScanVolume:
    """Mask the scan to its brightest connected structures and crop to them.

    Thresholds the volume (Otsu by default, or a fixed value), keeps the
    ``keep_components`` largest 3D connected components, zeroes everything
    else and crops to the union bounding box. An all-background scan comes
    back unchanged with a warning flag in the metadata.
    """
    validate_scan(scan)
    vox = scan.voxels
    thr = otsu_threshold(vox) if threshold is None else float(threshold)
    mask = vox > thr
    if not mask.any():
        meta = dict(scan.meta)
        meta["lung_warning"] = "no foreground above threshold"
        return replace(scan, meta=meta)
    labeled, n_comp = ndimage.label(mask)
    if n_comp > keep_components:
        sizes = np.bincount(labeled.ravel())
        sizes[0] = 0
        keep = np.argsort(sizes)[-keep_components:]
        mask = np.isin(labeled, keep[sizes[keep] > 0])
    coords = np.nonzero(mask)
    box = tuple(slice(int(c.min()), int(c.max()) + 1) for c in coords)
    out = np.where(mask, vox, np.float32(0.0))[box]
    meta = dict(scan.meta)
    meta["lung_bbox"] = tuple((b.start, b.stop) for b in box)
    meta["lung_threshold"] = thr
    return replace(scan, voxels=np.ascontiguousarray(out), meta=meta)


# ---------------------------------------------------------------------------
# resampling and canonicalization


def _resize_axis(arr: np.ndarray, axis: int, target: int) -> np.ndarray:
    n = arr.shape[axis]
    if n == target:
        return arr
    if target == 1:
        pos = np.array([(n - 1) / 2.0])
    else:
        pos = np.arange(target) * ((n - 1) / (target - 1))
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    w = (pos - lo).astype(arr.dtype)
    shape = [1] * arr.ndim
    shape[axis] = target
    w = w.reshape(shape)
    a0 = np.take(arr, lo, axis=axis)
    a1 = np.take(arr, hi, axis=axis)
    return a0 + (a1 - a0) * w


def resize_linear(volume: np.ndarray, target_shape: tuple[int, ...]) -> np.ndarray:
    """Separable linear resampling with corner-aligned coordinates.

    Equivalent to trilinear interpolation with edge clamping; exact identity
    when the target equals the input shape, and monotone along any axis where
    the input is monotone.
    """
    if volume.ndim != len(target_shape):
        raise PrepError(f"rank mismatch: {volume.shape} -> {target_shape}")
    if any(t < 1 for t in target_shape):
        raise PrepError(f"bad target shape {target_shape}")
    volume = np.asarray(volume)
    dtype = volume.dtype if volume.dtype == np.float64 else np.float32
    out = volume.astype(np.float64, copy=False)
    for axis, target in enumerate(target_shape):
        out = _resize_axis(out, axis, int(target))
    return np.ascontiguousarray(out.astype(dtype))


def minmax_normalize(volume: np.ndarray) -> np.ndarray:
    """Map to [0, 1] by per-volume min-max; a constant volume maps to zeros."""
    if not np.isfinite(volume).all():
        raise PrepError("cannot normalize non-finite volume")
    lo = float(volume.min())
    hi = float(volume.max())
    if hi <= lo:
        return np.zeros_like(volume, dtype=np.float32)
    return ((volume - lo) / (hi - lo)).astype(np.float32)


def canonicalize_3d(scan: ScanVolume) -> CanonicalVolume3D:
    """Resample to 128x256x256 then min-max normalize."""
    validate_scan(scan)
    return CanonicalVolume3D(minmax_normalize(resize_linear(scan.voxels, CANONICAL_3D)))


def canonicalize_2d(scan: ScanVolume) -> SliceStack2D:
    """Resample to 24x448x448 then min-max normalize."""
    validate_scan(scan)
    return SliceStack2D(minmax_normalize(resize_linear(scan.voxels, CANONICAL_2D)))


def pool_volume(volume: np.ndarray, factors: tuple[int, ...]) -> np.ndarray:
    """Exact block-mean pooling; factors must divide the volume shape."""
    if len(factors) != volume.ndim:
        raise PrepError(f"pool factors {factors} do not match rank {volume.ndim}")
    for dim, f in zip(volume.shape, factors):
        if f < 1 or dim % f:
            raise PrepError(f"pool factors {factors} do not divide shape {volume.shape}")
    s, r, c = volume.shape
    fs, fr, fc = factors
    blocks = volume.reshape(s // fs, fs, r // fr, fr, c // fc, fc)
    return blocks.mean(axis=(1, 3, 5), dtype=np.float32)


# ---------------------------------------------------------------------------
# scan-consistent augmentation


@dataclass(frozen=True)
class AugmentParams:
    """One crop/rotate/resize parameter set, shared by all slices of a scan."""

    crop_box: tuple[int, int, int, int, int, int]  # offsets then extents, (s, r, c)
    rotation_degrees: float
    resize_target: tuple[int, int, int]

    def key(self) -> tuple:
        return (self.crop_box, round(self.rotation_degrees, 9), self.resize_target)


@dataclass(frozen=True)
class AugmentBounds:
    """Uniform sampling bounds for augmentation parameters."""

    crop_fraction: tuple[float, float] = (0.85, 1.0)
    rotation_range: tuple[float, float] = (-10.0, 10.0)
    resize_target: tuple[int, int, int] = CANONICAL_3D

    def __post_init__(self):
        lo, hi = self.crop_fraction
        if not 0.0 < lo <= hi <= 1.0:
            raise PrepError(f"bad crop_fraction bounds {self.crop_fraction}")
        if self.rotation_range[0] > self.rotation_range[1]:
            raise PrepError(f"bad rotation_range {self.rotation_range}")


@dataclass
class AugmentCallRecord:
    scan_id: str
    slice_index: int
    params_key: tuple


class AugmentCallLog:
    """Audit log of per-slice augmentation applications."""

    def __init__(self):
        self.records: list[AugmentCallRecord] = []

    def record(self, scan_id: str, n_slices: int, params: AugmentParams) -> None:
        key = params.key()
        for idx in range(n_slices):
            self.records.append(AugmentCallRecord(scan_id, idx, key))

    def params_per_scan(self) -> dict[str, set[tuple]]:
        out: dict[str, set[tuple]] = {}
        for rec in self.records:
            out.setdefault(rec.scan_id, set()).add(rec.params_key)
        return out


def sample_augment_params(rng: np.random.Generator, bounds: AugmentBounds,
                          shape: tuple[int, int, int] = CANONICAL_3D) -> AugmentParams:
    """Draw one parameter set uniformly within bounds for a volume of ``shape``."""
    extents = []
    offsets = []
    for dim in shape:
        frac = rng.uniform(bounds.crop_fraction[0], bounds.crop_fraction[1])
        ext = max(1, int(round(dim * frac)))
        ext = min(ext, dim)
        off = int(rng.integers(0, dim - ext + 1))
        offsets.append(off)
        extents.append(ext)
    rotation = float(rng.uniform(bounds.rotation_range[0], bounds.rotation_range[1]))
    return AugmentParams(
        crop_box=(offsets[0], offsets[1], offsets[2], extents[0], extents[1], extents[2]),
        rotation_degrees=rotation,
        resize_target=tuple(bounds.resize_target),
    )


def _validate_crop(box: tuple[int, ...], shape: tuple[int, ...]) -> None:
    offs, exts = box[:3], box[3:]
    for off, ext, dim in zip(offs, exts, shape):
        if off < 0 or ext < 1 or off + ext > dim:
            raise PrepError(f"crop box {box} exceeds volume shape {shape}")


def augment_scan(volume: CanonicalVolume3D, params: AugmentParams,
                 log: AugmentCallLog | None = None,
                 scan_id: str = "") -> CanonicalVolume3D:
    """Crop, rotate in-plane and resize back, identically for every slice."""
    vox = volume.voxels
    _validate_crop(params.crop_box, vox.shape)
    os_, or_, oc, es, er, ec = params.crop_box
    out = vox[os_:os_ + es, or_:or_ + er, oc:oc + ec]
    if params.rotation_degrees != 0.0:
        out = ndimage.rotate(out, params.rotation_degrees, axes=(1, 2),
                             reshape=False, order=1, mode="nearest")
        out = np.clip(out, 0.0, 1.0)
    if out.shape != tuple(params.resize_target):
        out = resize_linear(out, tuple(params.resize_target))
        out = np.clip(out, 0.0, 1.0)
    if log is not None:
        log.record(scan_id, vox.shape[0], params)
    return CanonicalVolume3D(np.ascontiguousarray(out, dtype=np.float32))


def stack_from_canonical3d(volume: CanonicalVolume3D) -> np.ndarray:
    """View the 3D canonical volume as a slice sequence (128 slices of 256x256)."""
    return volume.voxels


def iter_scan_volumes(manifest_rows, root) -> Iterable[ScanVolume]:
    """Yield ScanVolumes for manifest rows, resolving paths against ``root``."""
    from . import storage  # local import to keep prep importable standalone

    for row in manifest_rows:
        vox = storage.read_volume(root / row.path)
        yield ScanVolume(vox, scan_id=row.scan_id, source=row.source, label=row.label)
