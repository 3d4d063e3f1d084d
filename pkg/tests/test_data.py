import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dnasforge.data import (Dataset, blob_templates, cifar10_bytes, cifar_subset, concat_datasets, load_cifar10_bin,
                            read_cifar10_bytes, split_dataset, synth_blobs, write_cifar10_bin)
from dnasforge.errors import DatasetFormatError
from dnasforge.rng import Rng


def _nearest_template(d: Dataset, size: int) -> np.ndarray:
    t = blob_templates(d.class_count, size, d.images.shape[1]).reshape(d.class_count, -1)
    x = d.images.reshape(len(d), -1)
    return np.argmin(((x[:, None, :] - t[None]) ** 2).sum(axis=2), axis=1)


@pytest.mark.parametrize("classes,size", [(2, 8), (4, 8), (10, 12)])
def test_noiseless_blobs_are_template_separable(classes, size):
    d = synth_blobs(200, classes, size, 0.0, seed=1)
    assert np.array_equal(_nearest_template(d, size), d.labels)


def test_templates_are_distinct_and_in_range():
    t = blob_templates(4, 8)
    assert t.shape == (4, 1, 8, 8)
    assert t.min() >= 0 and t.max() <= 1
    flat = t.reshape(4, -1)
    assert min(np.abs(flat[i] - flat[j]).max() for i in range(4) for j in range(i + 1, 4)) > 0.1


@settings(max_examples=40)
@given(st.integers(1, 300), st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_blobs_are_balanced(n, classes, seed):
    d = synth_blobs(n, classes, 6, 0.2, seed=seed)
    counts = np.bincount(d.labels, minlength=classes)
    assert set(counts.tolist()) <= {n // classes, -(-n // classes)}
    assert d.images.min() >= 0 and d.images.max() <= 1


def test_blobs_are_seed_deterministic():
    a, b = synth_blobs(50, 3, 8, 0.3, seed=9), synth_blobs(50, 3, 8, 0.3, seed=9)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    c = synth_blobs(50, 3, 8, 0.3, seed=10)
    assert not np.array_equal(a.images, c.images)
    with pytest.raises(ValueError):
        synth_blobs(10, 1)


def test_split_examples():
    d = synth_blobs(10, 2, 4, seed=0)
    a, b = split_dataset(d, 0.8, 3)
    assert (len(a), len(b)) == (8, 2)
    a2, b2 = split_dataset(d, 0.8, 3)
    assert np.array_equal(a.images, a2.images) and np.array_equal(b.labels, b2.labels)
    with pytest.raises(ValueError):
        split_dataset(d, 0.99, 0)
    with pytest.raises(ValueError):
        split_dataset(d, 1.0, 0)


@settings(max_examples=30)
@given(st.integers(2, 80), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_is_disjoint_partition(n, ratio, seed):
    d = Dataset(np.arange(n, dtype=np.float64).reshape(n, 1, 1, 1), np.zeros(n, dtype=np.int64), 1)
    k = round(ratio * n)
    if k in (0, n):
        with pytest.raises(ValueError):
            split_dataset(d, ratio, seed)
        return
    a, b = split_dataset(d, ratio, seed)
    ia, ib = set(a.images.ravel()), set(b.images.ravel())
    assert not ia & ib and ia | ib == set(range(n))


def test_batches_cover_dataset_once():
    d = synth_blobs(23, 2, 4, seed=0)
    seen = np.concatenate([y for _, y in d.batches(5, Rng(1))])
    assert len(seen) == 23 and sorted(seen.tolist()) == sorted(d.labels.tolist())
    sizes = [len(y) for _, y in d.batches(5)]
    assert sizes == [5, 5, 5, 5, 3]


def test_dataset_validation_and_concat():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 4, 4)), np.zeros(2, dtype=np.int64), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 4, 4)), np.array([0, 2]), 2)
    a, b = synth_blobs(6, 2, 4, seed=0), synth_blobs(4, 2, 4, seed=1)
    assert len(concat_datasets(a, b)) == 10
    with pytest.raises(ValueError):
        concat_datasets(a, synth_blobs(4, 3, 4, seed=1))


def _random_records(k, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(k, 3, 32, 32), dtype=np.uint8), rng.integers(0, 10, size=k)


def test_cifar_round_trip(tmp_path):
    images, labels = _random_records(7)
    path = tmp_path / "data_batch_1.bin"
    write_cifar10_bin(path, images, labels)
    assert path.stat().st_size == 7 * 3073
    d = load_cifar10_bin(path)
    assert np.array_equal(d.labels, labels)
    assert np.array_equal(np.rint(d.images * 255).astype(np.uint8), images)
    assert d.images.shape == (7, 3, 32, 32) and d.class_count == 10


def test_cifar_channel_major_layout():
    rec = bytearray(3073)
    rec[0] = 5
    rec[1] = 255          # R plane, pixel (0, 0)
    rec[1 + 1024 + 33] = 255  # G plane, pixel (1, 1)
    d = read_cifar10_bytes(bytes(rec))
    assert d.images[0, 0, 0, 0] == 1.0 and d.images[0, 1, 1, 1] == 1.0
    assert d.images.sum() == 2.0


def test_cifar_zero_pixel_record():
    rec = bytes([3]) + bytes(3072)
    d = read_cifar10_bytes(rec)
    assert d.labels.tolist() == [3] and not d.images.any()


def test_cifar_malformed_inputs(tmp_path):
    empty = tmp_path / "empty.bin"
    empty.write_bytes(b"")
    with pytest.raises(DatasetFormatError, match="zero records"):
        load_cifar10_bin(empty)
    images, labels = _random_records(2)
    raw = cifar10_bytes(images, labels)
    with pytest.raises(DatasetFormatError, match="not a multiple of 3073"):
        read_cifar10_bytes(raw[:-1])
    bad = bytearray(raw)
    bad[3073] = 10
    with pytest.raises(DatasetFormatError, match="label 10"):
        read_cifar10_bytes(bytes(bad))
    with pytest.raises(ValueError):
        cifar10_bytes(images, np.array([0, 11]))


def test_cifar_subset_relabels():
    images, _ = _random_records(6)
    labels = np.array([3, 7, 1, 3, 7, 7])
    d = read_cifar10_bytes(cifar10_bytes(images, labels))
    sub = cifar_subset(d, (7, 3), limit=4)
    assert sub.labels.tolist() == [1, 0, 1, 0] and sub.class_count == 2
    with pytest.raises(DatasetFormatError):
        cifar_subset(d, (0,))
