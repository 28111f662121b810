from __future__ import annotations

import gzip
import struct

import numpy as np
import pytest

from bcflsim.datasets import (IMAGES_MAGIC, LABELS_MAGIC, IdxFormatError, SyntheticSpec, load_dataset, load_idx,
                              parse_idx, synthetic)


def idx_bytes(magic: int, arr: np.ndarray) -> bytes:
    return struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.astype(np.uint8).tobytes()


def test_header_decodes_shape_and_payload():
    imgs = np.arange(2 * 3 * 4).reshape(2, 3, 4)
    out = parse_idx(idx_bytes(IMAGES_MAGIC, imgs), IMAGES_MAGIC)
    assert out.shape == (2, 3, 4) and (out == imgs).all()


def test_bad_magic_reports_offset_zero():
    with pytest.raises(IdxFormatError) as e:
        parse_idx(idx_bytes(0x00000802, np.zeros((1, 1))), IMAGES_MAGIC)
    assert e.value.offset == 0 and "bad magic" in str(e.value)


def test_payload_size_mismatch():
    blob = idx_bytes(IMAGES_MAGIC, np.zeros((2, 2, 2)))
    with pytest.raises(IdxFormatError) as e:
        parse_idx(blob[:-1], IMAGES_MAGIC)
    assert e.value.offset == 16
    with pytest.raises(IdxFormatError):
        parse_idx(b"\x00\x00", IMAGES_MAGIC)


def test_load_idx_scales_and_checks_counts(tmp_path):
    imgs = np.full((3, 2, 2), 255)
    (tmp_path / "images-idx3-ubyte.gz").write_bytes(gzip.compress(idx_bytes(IMAGES_MAGIC, imgs)))
    (tmp_path / "labels-idx1-ubyte").write_bytes(idx_bytes(LABELS_MAGIC, np.array([1, 2, 3])))
    ds = load_dataset({"kind": "idx", "path": str(tmp_path)})
    assert ds.features.shape == (3, 4) and ds.features.max() == 1.0
    assert ds.labels.tolist() == [1, 2, 3]
    (tmp_path / "short-labels").write_bytes(idx_bytes(LABELS_MAGIC, np.array([1, 2])))
    with pytest.raises(IdxFormatError):
        load_idx(tmp_path / "images-idx3-ubyte.gz", tmp_path / "short-labels")


def test_synthetic_is_balanced_and_deterministic():
    ds = synthetic(SyntheticSpec(classes=10, dims=20, per_class=100, seed=3))
    assert ds.features.shape == (1000, 20)
    assert np.bincount(ds.labels).tolist() == [100] * 10
    assert 0.0 <= ds.features.min() and ds.features.max() <= 1.0
    again = synthetic(SyntheticSpec(classes=10, dims=20, per_class=100, seed=3))
    assert (again.features == ds.features).all()
    with pytest.raises(ValueError):
        SyntheticSpec(classes=1)


def test_synthetic_classes_are_separable_by_nearest_mean():
    ds = synthetic(SyntheticSpec(classes=10, dims=64, per_class=100, seed=0))
    means = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(10)])
    pred = np.argmin(((ds.features[:, None, :] - means[None]) ** 2).sum(axis=2), axis=1)
    assert (pred == ds.labels).mean() >= 0.95


def test_packaged_mnist_subset():
    ds = load_dataset({"kind": "mnist5k"})
    assert ds.features.shape == (5000, 784)
    assert set(np.unique(ds.labels).tolist()) == set(range(10))
    assert 0.0 <= ds.features.min() and ds.features.max() <= 1.0
    with pytest.raises(ValueError):
        load_dataset({"kind": "cifar"})
