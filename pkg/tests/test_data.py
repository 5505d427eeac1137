import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedsmooth import data
from fedsmooth.errors import ConfigError, FormatError


def test_idx_fixture_scaling(tmp_path):
    img, lbl = tmp_path / "img.idx", tmp_path / "lbl.idx"
    images = np.array([[[0, 255], [128, 64]], [[1, 2], [3, 4]]], dtype=np.uint8)
    data.write_idx(img, lbl, images, [3, 7])
    raw = img.read_bytes()
    assert raw[:16] == bytes.fromhex("00000803") + struct.pack(">3I", 2, 2, 2)
    ds = data.load_idx(img, lbl)
    np.testing.assert_array_equal(ds.features[0], [0.0, 1.0, 128 / 255, 64 / 255])
    assert ds.labels.tolist() == [3, 7]
    assert ds.dim == 4 and len(ds) == 2


def test_idx_wrong_magic(tmp_path):
    img, lbl = tmp_path / "img.idx", tmp_path / "lbl.idx"
    data.write_idx(img, lbl, np.zeros((1, 2, 2)), [0])
    with pytest.raises(FormatError, match="0x00000803.*0x00000801"):
        data.load_idx(lbl, lbl)


def test_idx_count_mismatch(tmp_path):
    img, lbl, lbl2 = tmp_path / "img.idx", tmp_path / "lbl.idx", tmp_path / "lbl2.idx"
    data.write_idx(img, lbl, np.zeros((2, 2, 2)), [0, 1])
    data.write_idx(tmp_path / "x", lbl2, np.zeros((3, 2, 2)), [0, 1, 2])
    with pytest.raises(FormatError, match="2 images but"):
        data.load_idx(img, lbl2)


def test_idx_truncated(tmp_path):
    img, lbl = tmp_path / "img.idx", tmp_path / "lbl.idx"
    data.write_idx(img, lbl, np.zeros((2, 3, 3)), [0, 1])
    img.write_bytes(img.read_bytes()[:-1])
    with pytest.raises(FormatError, match="pixel bytes"):
        data.load_idx(img, lbl)
    img.write_bytes(img.read_bytes()[:10])
    with pytest.raises(FormatError, match="truncated"):
        data.load_idx(img, lbl)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 5), st.integers(1, 5))
def test_idx_roundtrip(tmp_path_factory, seed, count, rows, cols):
    tmp = tmp_path_factory.mktemp("idx")
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, (count, rows, cols), dtype=np.uint8)
    labels = rng.integers(0, 10, count, dtype=np.uint8)
    data.write_idx(tmp / "i", tmp / "l", images, labels)
    ds = data.load_idx(tmp / "i", tmp / "l")
    assert np.array_equal(np.rint(ds.features * 255).astype(np.uint8), images.reshape(count, -1))
    assert np.array_equal(ds.labels, labels)


def test_blobs_zero_spread_hits_centers():
    ds = data.synth_blobs(4, 5, 8, 0.0, seed=3)
    centers = data.blob_centers(4, 8, 0.25, 3)
    assert len(ds) == 20
    for c in range(4):
        assert np.array_equal(ds.features[ds.labels == c], np.tile(centers[c], (5, 1)))


def test_blobs_counts_and_range():
    ds = data.synth_blobs(7, 13, 5, 0.3, seed=1)
    assert len(ds) == 7 * 13
    assert np.bincount(ds.labels).tolist() == [13] * 7
    assert ds.features.min() >= 0 and ds.features.max() <= 1


def test_blobs_deterministic():
    a = data.synth_blobs(3, 10, 4, 0.1, seed=5)
    b = data.synth_blobs(3, 10, 4, 0.1, seed=5)
    assert np.array_equal(a.features, b.features)


def test_blobs_nearest_center_separable():
    ds = data.synth_blobs(10, 200, 16, 0.05, seed=11)
    centers = data.blob_centers(10, 16, 0.25, 11)
    dist = np.linalg.norm(ds.features[:, None, :] - centers[None], axis=2)
    assert np.mean(dist.argmin(axis=1) == ds.labels) >= 0.99


def test_split_sizes_and_disjoint():
    ds = data.Dataset(np.linspace(0, 1, 10)[:, None], np.arange(10) % 2, 2)
    a, b = data.split(ds, 0.5, seed=0)
    assert len(a) == 5 and len(b) == 5
    values = sorted(a.features[:, 0].tolist() + b.features[:, 0].tolist())
    assert values == sorted(ds.features[:, 0].tolist())
    assert not set(a.features[:, 0]) & set(b.features[:, 0])
    c, _ = data.split(ds, 0.5, seed=0)
    assert np.array_equal(a.features, c.features)


def test_split_rejects_empty_side():
    ds = data.Dataset(np.zeros((3, 1)), [0, 1, 0], 2)
    with pytest.raises(ValueError):
        data.split(ds, 0.1, seed=0)
    with pytest.raises(ValueError):
        data.split(ds, 1.0, seed=0)


def test_dataset_validation():
    with pytest.raises(ValueError):
        data.Dataset(np.full((2, 2), 1.5), [0, 1], 2)
    with pytest.raises(ValueError):
        data.Dataset(np.zeros((2, 2)), [0, 2], 2)
    with pytest.raises(ConfigError, match="class 2"):
        data.require_classes(data.Dataset(np.zeros((2, 2)), [0, 1], 3))


def test_blobs_background_features_are_zero():
    plain = data.synth_blobs(3, 4, 5, 0.1, seed=2)
    padded = data.synth_blobs(3, 4, 5, 0.1, seed=2, background=7)
    assert padded.dim == 12
    assert np.array_equal(padded.features[:, :5], plain.features)
    assert not padded.features[:, 5:].any()


def test_idx_gzip_matches_plain(tmp_path):
    import gzip

    img, lbl = tmp_path / "img.idx", tmp_path / "lbl.idx"
    images = np.random.default_rng(0).integers(0, 256, (3, 4, 5), dtype=np.uint8)
    data.write_idx(img, lbl, images, [0, 1, 2])
    for path in (img, lbl):
        path.with_suffix(".gz").write_bytes(gzip.compress(path.read_bytes()))
    plain = data.load_idx(img, lbl)
    packed = data.load_idx(img.with_suffix(".gz"), lbl.with_suffix(".gz"))
    assert np.array_equal(plain.features, packed.features)
    assert np.array_equal(plain.labels, packed.labels)


def test_idx_corrupt_gzip(tmp_path):
    img, lbl = tmp_path / "img.gz", tmp_path / "lbl.idx"
    data.write_idx(tmp_path / "x", lbl, np.zeros((1, 2, 2)), [0])
    img.write_bytes(b"\x1f\x8b" + b"garbage")
    with pytest.raises(FormatError, match="gzip"):
        data.load_idx(img, lbl)
