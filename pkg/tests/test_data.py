import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uapforge.data import (
    CIFAR_RECORD_BYTES,
    CorruptRecordError,
    DataFormatError,
    Dataset,
    SplitSpec,
    TruncatedFileError,
    load_dataset,
    split_balanced,
    subset_fraction,
    synthetic_dataset,
    to_model_units,
)


def test_synthetic_contract():
    ds = synthetic_dataset(classes=3, size=8, n=300, seed=7)
    assert ds.images.shape == (300, 3, 8, 8)
    counts = np.bincount(ds.labels, minlength=3)
    assert counts.tolist() == [100, 100, 100]
    assert ds.input_range == (0.0, 255.0)


def test_synthetic_deterministic():
    a = synthetic_dataset(classes=3, size=8, n=60, seed=11)
    b = synthetic_dataset(classes=3, size=8, n=60, seed=11)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    c = synthetic_dataset(classes=3, size=8, n=60, seed=12)
    assert not np.array_equal(a.images, c.images)


def test_dataset_invariants_checked():
    img = np.zeros((4, 3, 2, 2), dtype=np.float32)
    with pytest.raises(DataFormatError):
        Dataset(img, np.array([0, 1, 2, 5]), 3, (0.0, 255.0))
    with pytest.raises(DataFormatError):
        Dataset(img - 1.0, np.zeros(4, dtype=int), 3, (0.0, 255.0))
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((0, 3, 2, 2)), np.zeros(0, dtype=int), 3, (0.0, 255.0))


def _write_cifar(path, n=6, label_fn=lambda i: i % 10, seed=3):
    rng = np.random.default_rng(seed)
    rec = np.empty((n, CIFAR_RECORD_BYTES), dtype=np.uint8)
    for i in range(n):
        rec[i, 0] = label_fn(i)
        rec[i, 1:] = rng.integers(0, 256, CIFAR_RECORD_BYTES - 1)
    path.write_bytes(rec.tobytes())
    return rec


def test_cifar_record_size_and_roundtrip(tmp_path):
    f = tmp_path / "data_batch_1.bin"
    rec = _write_cifar(f, n=10)
    assert f.stat().st_size == 10 * 3073
    ds = load_dataset(str(f), "cifar10-binary")
    assert ds.images.shape == (10, 3, 32, 32)
    assert np.array_equal(ds.labels, rec[:, 0])
    # channel-major pixel layout: record bytes 1..1024 are the red plane
    assert np.array_equal(ds.images[0, 0].reshape(-1), rec[0, 1:1025].astype(np.float32))
    again = load_dataset(str(f), "cifar10-binary")
    assert np.array_equal(ds.images, again.images)


def test_cifar_truncated_reports_offset(tmp_path):
    f = tmp_path / "bad.bin"
    _write_cifar(f, n=3)
    f.write_bytes(f.read_bytes()[:-10])
    with pytest.raises(TruncatedFileError) as ei:
        load_dataset(str(f), "cifar10-binary")
    assert ei.value.byte_offset == 2 * 3073


def test_cifar_bad_label(tmp_path):
    f = tmp_path / "corrupt.bin"
    _write_cifar(f, n=4, label_fn=lambda i: 11 if i == 2 else 0)
    with pytest.raises(CorruptRecordError, match="record 2"):
        load_dataset(str(f), "cifar10-binary")


def test_cifar_directory_concatenation(tmp_path):
    _write_cifar(tmp_path / "data_batch_2.bin", n=4, seed=1)
    _write_cifar(tmp_path / "data_batch_1.bin", n=3, seed=2)
    ds = load_dataset(str(tmp_path), "cifar10-binary")
    assert len(ds) == 7
    first = load_dataset(str(tmp_path / "data_batch_1.bin"), "cifar10-binary")
    assert np.array_equal(ds.images[:3], first.images)


def test_split_balanced_partition():
    ds = synthetic_dataset(classes=4, size=6, n=200, seed=5)
    train, val = split_balanced(ds, SplitSpec(30, 10, seed=1))
    assert np.bincount(train.labels, minlength=4).tolist() == [30] * 4
    assert np.bincount(val.labels, minlength=4).tolist() == [10] * 4
    # disjointness via exact image matching
    joined = np.concatenate([train.images, val.images]).reshape(160, -1)
    assert len(np.unique(joined, axis=0)) == 160


def test_split_insufficient_names_class():
    ds = synthetic_dataset(classes=3, size=6, n=30, seed=5)
    with pytest.raises(Exception, match="class 0"):
        split_balanced(ds, SplitSpec(9, 3, seed=0))


def test_split_empty_val_is_degenerate():
    ds = synthetic_dataset(classes=3, size=6, n=30, seed=5)
    train, val = split_balanced(ds, SplitSpec(8, 0, seed=0))
    assert val is None
    assert np.bincount(train.labels, minlength=3).tolist() == [8, 8, 8]


def test_subset_balanced_and_idempotent():
    ds = synthetic_dataset(classes=10, size=6, n=600, seed=9)
    sub = subset_fraction(ds, 50, seed=3)
    assert np.bincount(sub.labels, minlength=10).tolist() == [5] * 10
    sub2 = subset_fraction(ds, 50, seed=3)
    assert np.array_equal(sub.images, sub2.images)


def test_subset_fraction_arithmetic():
    ds = synthetic_dataset(classes=10, size=4, n=500, seed=9)
    sub = subset_fraction(ds, 0.2, seed=1)
    assert len(sub) == 100
    assert np.bincount(sub.labels, minlength=10).tolist() == [10] * 10


def test_subset_full_fraction_same_contents():
    ds = synthetic_dataset(classes=3, size=4, n=60, seed=9)
    sub = subset_fraction(ds, 1.0, seed=4)
    assert len(sub) == 60
    a = np.sort(ds.images.reshape(60, -1).sum(axis=1))
    b = np.sort(sub.images.reshape(60, -1).sum(axis=1))
    assert np.allclose(a, b)


def test_subset_zero_errors():
    ds = synthetic_dataset(classes=3, size=4, n=60, seed=9)
    with pytest.raises(ValueError):
        subset_fraction(ds, 0, seed=0)


@given(st.integers(1, 60), st.integers(0, 2**31 - 1))
def test_subset_counts_are_largest_remainder(m, seed):
    ds = synthetic_dataset(classes=3, size=4, n=60, seed=2)
    sub = subset_fraction(ds, int(m), seed=seed)
    counts = np.bincount(sub.labels, minlength=3)
    assert counts.sum() == m
    assert counts.max() - counts.min() <= 1


def test_to_model_units():
    ds = synthetic_dataset(classes=3, size=4, n=30, seed=2)
    x = to_model_units(ds.images, ds.input_range)
    assert x.min() >= 0.0 and x.max() <= 1.0
    assert x.dtype == np.float32
