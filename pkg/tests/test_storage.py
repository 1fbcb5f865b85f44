import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctexperts.storage import (HEADER, MAGIC, ManifestRow, StorageError,
                               read_manifest, read_volume, write_manifest,
                               write_volume)


def test_volume_round_trip(tmp_path):
    vox = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4) / 10.0
    path = tmp_path / "scan.ctv"
    write_volume(path, vox)
    back = read_volume(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, vox)


def test_volume_header_layout(tmp_path):
    vox = np.zeros((5, 6, 7), dtype=np.float32)
    path = tmp_path / "scan.ctv"
    write_volume(path, vox)
    raw = path.read_bytes()
    magic, ns, nr, nc = HEADER.unpack_from(raw)
    assert magic == MAGIC
    assert (ns, nr, nc) == (5, 6, 7)
    assert len(raw) == HEADER.size + 4 * 5 * 6 * 7


@settings(max_examples=25, deadline=None)
@given(
    shape=st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
    seed=st.integers(0, 2 ** 16),
)
def test_volume_round_trip_property(tmp_path_factory, shape, seed):
    vox = np.random.default_rng(seed).normal(size=shape).astype(np.float32)
    path = tmp_path_factory.mktemp("vol") / "v.ctv"
    write_volume(path, vox)
    assert np.array_equal(read_volume(path), vox)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ctv"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(StorageError, match="magic"):
        read_volume(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "short.ctv"
    write_volume(path, np.zeros((2, 2, 2), dtype=np.float32))
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(StorageError, match="bytes"):
        read_volume(path)


def test_non_3d_volume_rejected(tmp_path):
    with pytest.raises(StorageError, match="3D"):
        write_volume(tmp_path / "x.ctv", np.zeros((4, 4), dtype=np.float32))


def test_non_finite_volume_rejected(tmp_path):
    vox = np.zeros((2, 2, 2), dtype=np.float32)
    vox[0, 0, 0] = np.nan
    with pytest.raises(StorageError, match="non-finite"):
        write_volume(tmp_path / "x.ctv", vox)


def test_manifest_round_trip(tmp_path):
    rows = [
        ManifestRow("a", "train", 0, 1, "volumes/a.ctv"),
        ManifestRow("b", "test", None, None, "volumes/b.ctv", excluded=True),
    ]
    path = tmp_path / "manifest.csv"
    write_manifest(path, rows)
    back = read_manifest(path)
    assert back == rows
    assert back[1].source is None and back[1].label is None and back[1].excluded


def test_manifest_unknown_spelled_out(tmp_path):
    path = tmp_path / "manifest.csv"
    write_manifest(path, [ManifestRow("t", "test", None, None, "v.ctv")])
    assert "unknown,unknown" in path.read_text()


def test_manifest_duplicate_scan_id_rejected(tmp_path):
    path = tmp_path / "manifest.csv"
    write_manifest(path, [
        ManifestRow("a", "train", 0, 1, "x.ctv"),
        ManifestRow("a", "train", 0, 0, "y.ctv"),
    ])
    with pytest.raises(StorageError, match="duplicate"):
        read_manifest(path)


def test_manifest_bad_header_rejected(tmp_path):
    path = tmp_path / "manifest.csv"
    path.write_text("id,who,knows\n1,2,3\n")
    with pytest.raises(StorageError, match="header"):
        read_manifest(path)
