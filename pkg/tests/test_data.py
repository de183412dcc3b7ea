import gzip
import hashlib
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from unsir.data import (LabeledDataset, SyntheticSpec, batch_indices, batches, concat, generate_synthetic,
                        load_cifar_binary, load_digits_dataset, load_idx, partition, sample_retain_subset,
                        train_test_split)
from unsir.errors import ConfigError, ContractError, FormatError
from unsir.models import ModelSpec, build_model, predict, train
from oracles import fixtures


def write(tmp_path, name, payload):
    p = tmp_path / name
    p.write_bytes(payload)
    return p


def toy(n=10, k=3):
    return LabeledDataset(np.arange(n * 4, dtype=float).reshape(n, 1, 2, 2), np.arange(n) % k, k, "toy")


# -- IDX -----------------------------------------------------------------------

def test_idx_two_image_fixture(tmp_path):
    imgs = [[[0, 255], [255, 0]], [[255, 255], [0, 128]]]
    ip = write(tmp_path, "img.idx", fixtures.idx_images(imgs))
    lp = write(tmp_path, "lab.idx", fixtures.idx_labels([3, 1]))
    ds = load_idx(ip, lp)
    assert ds.samples.shape == (2, 1, 2, 2) and ds.num_classes == 4
    assert ds.samples[0, 0].tolist() == [[0.0, 1.0], [1.0, 0.0]]
    assert ds.samples[1, 0, 1, 1] == pytest.approx(128 / 255)
    assert ds.labels.tolist() == [3, 1]


def test_idx_gzip_and_explicit_class_count(tmp_path):
    imgs = [[[i] * 3] * 3 for i in range(4)]
    ip = write(tmp_path, "img.gz", gzip.compress(fixtures.idx_images(imgs)))
    lp = write(tmp_path, "lab.gz", gzip.compress(fixtures.idx_labels([0, 1, 2, 1])))
    ds = load_idx(ip, lp, num_classes=10)
    assert len(ds) == 4 and ds.num_classes == 10


def test_idx_count_mismatch(tmp_path):
    ip = write(tmp_path, "i", fixtures.idx_images([[[0]]] * 3))
    lp = write(tmp_path, "l", fixtures.idx_labels([0, 1]))
    with pytest.raises(FormatError, match="3 images but 2 labels"):
        load_idx(ip, lp)


def test_idx_bad_magic_and_truncation(tmp_path):
    good_l = write(tmp_path, "l", fixtures.idx_labels([0, 1]))
    bad = write(tmp_path, "bad", fixtures.idx_images([[[0]]] * 2, magic=0x00000801))
    with pytest.raises(FormatError, match="offset 0"):
        load_idx(bad, good_l)
    short = write(tmp_path, "short", fixtures.idx_images([[[1, 2], [3, 4]]] * 2)[:-3])
    with pytest.raises(FormatError, match="truncated"):
        load_idx(short, good_l)
    with pytest.raises(FormatError):
        load_idx(write(tmp_path, "tiny", b"\x00\x00"), good_l)


def test_idx_values_in_unit_interval(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(5, 4, 4)).tolist()
    ds = load_idx(write(tmp_path, "i", fixtures.idx_images(imgs)), write(tmp_path, "l", fixtures.idx_labels([0] * 5)))
    assert ds.samples.min() >= 0 and ds.samples.max() <= 1
    np.testing.assert_array_equal(np.rint(ds.samples[:, 0] * 255).astype(int), np.array(imgs))


# -- CIFAR ---------------------------------------------------------------------

def test_cifar_single_record(tmp_path):
    p = write(tmp_path, "one.bin", fixtures.cifar_records([(7, [10] * 3072)]))
    ds = load_cifar_binary(p)
    assert len(ds) == 1 and ds.labels.tolist() == [7] and ds.samples.shape == (1, 3, 32, 32)


def test_cifar_empty_file(tmp_path):
    ds = load_cifar_binary(write(tmp_path, "empty.bin", b""))
    assert len(ds) == 0 and ds.samples.shape == (0, 3, 32, 32)


def test_cifar_three_record_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    recs = [(int(rng.integers(0, 10)), rng.integers(0, 256, size=3 * 4 * 2).tolist()) for _ in range(3)]
    ds = load_cifar_binary(write(tmp_path, "three.bin", fixtures.cifar_records(recs)), height=4, width=2)
    for i, (label, pixels) in enumerate(recs):
        assert ds.labels[i] == label
        assert np.rint(ds.samples[i] * 255).astype(int).ravel().tolist() == pixels


def test_cifar_bad_length_and_multiple_files(tmp_path):
    rec = fixtures.cifar_records([(1, [0] * 12)])
    with pytest.raises(FormatError, match="multiple of record size"):
        load_cifar_binary(write(tmp_path, "bad.bin", rec + b"\x00"), height=2, width=2)
    ds = load_cifar_binary([write(tmp_path, "a", rec), write(tmp_path, "b", rec * 2)], height=2, width=2)
    assert len(ds) == 3


# -- synthetic -----------------------------------------------------------------

def test_synthetic_balanced_and_deterministic():
    spec = SyntheticSpec(10, (1, 8, 8), 500, 6.0, 1.0)
    a, b = generate_synthetic(spec, 3), generate_synthetic(spec, 3)
    assert len(a) == 5000 and np.bincount(a.labels).tolist() == [500] * 10
    assert np.array_equal(a.samples, b.samples) and np.array_equal(a.labels, b.labels)


def test_synthetic_center_separation():
    from unsir.data import synthetic_centers
    from unsir.rng import SplitMix64
    spec = SyntheticSpec(6, (5,), 1, 4.0, 0.0)
    c = synthetic_centers(spec, SplitMix64(1))
    d = np.sqrt(((c[:, None] - c[None]) ** 2).sum(-1))[np.triu_indices(6, 1)]
    assert d.min() == pytest.approx(4.0) and np.all(d >= 4.0 - 1e-9)


def test_synthetic_errors():
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticSpec(separation=0.0), 0)
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticSpec(num_classes=1), 0)
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticSpec(per_class=0), 0)


def test_separable_two_class_blobs_train_an_mlp():
    ds = generate_synthetic(SyntheticSpec(2, (2,), 100, 10.0, 0.5), 0)
    model = build_model(ModelSpec("mlp", (2,), 2, hidden=(16,), init_seed=1))
    history = train(model, ds, 5, 8, 0.05, 2)
    assert history.accuracy[-1] >= 0.99
    assert (predict(model, ds.samples)[0] == ds.labels).mean() > 0.99


def test_digits_loader_is_normalized():
    ds = load_digits_dataset()
    assert ds.input_shape == (1, 8, 8) and ds.num_classes == 10
    assert ds.samples.min() >= 0 and ds.samples.max() <= 1


# -- partition -----------------------------------------------------------------

def sample_hashes(ds):
    return Counter(hashlib.sha256(x.tobytes() + bytes([y])).hexdigest() for x, y in zip(ds.samples, ds.labels))


def test_partition_counts_and_purity():
    ds = generate_synthetic(SyntheticSpec(10, (4,), 500, 5.0), 0)
    p = partition(ds, {0})
    assert len(p.forget_set) == 500 and len(p.retain_set) == 4500
    p4 = partition(ds, {3, 4, 5, 6})
    assert set(p4.forget_set.labels.tolist()) == {3, 4, 5, 6}
    assert not np.isin(p4.retain_set.labels, [3, 4, 5, 6]).any()
    assert sample_hashes(p4.forget_set) + sample_hashes(p4.retain_set) == sample_hashes(ds)
    assert not set(sample_hashes(p4.forget_set)) & set(sample_hashes(p4.retain_set))


def test_partition_rejects_bad_forget_sets():
    ds = toy()
    for bad in (set(), {0, 1, 2}, {5}):
        with pytest.raises(ContractError):
            partition(ds, bad)


@given(st.integers(2, 6), st.integers(1, 30), st.data())
def test_partition_completeness_property(k, n, data):
    labels = np.array(data.draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n)))
    ds = LabeledDataset(np.arange(n, dtype=float)[:, None], labels, k)
    forget = data.draw(st.sets(st.integers(0, k - 1), min_size=1, max_size=k - 1))
    p = partition(ds, forget)
    assert len(p.forget_set) + len(p.retain_set) == n
    assert np.isin(p.forget_set.labels, sorted(forget)).all()
    assert not np.isin(p.retain_set.labels, sorted(forget)).any()
    # each side keeps source order
    assert np.all(np.diff(p.forget_set.samples[:, 0]) > 0) and np.all(np.diff(p.retain_set.samples[:, 0]) > 0)


# -- retain subset -------------------------------------------------------------

def test_retain_subset_counts():
    ds = generate_synthetic(SyntheticSpec(10, (2,), 5000, 5.0), 0)
    sub = sample_retain_subset(partition(ds, {0}), 1000, seed=1)
    assert len(sub) == 9000
    assert np.bincount(sub.subset.labels, minlength=10).tolist() == [0] + [1000] * 9


def test_retain_subset_saturates_and_is_deterministic():
    p = partition(toy(30, 3), {1})
    whole = sample_retain_subset(p, 50, seed=0)
    assert np.array_equal(whole.subset.samples, p.retain_set.samples)
    a, b = sample_retain_subset(p, 4, seed=9), sample_retain_subset(p, 4, seed=9)
    assert np.array_equal(a.subset.samples, b.subset.samples)


def test_retain_subset_fraction_and_errors():
    p = partition(toy(300, 3), {0})
    sub = sample_retain_subset(p, seed=0, fraction=0.1)
    assert np.bincount(sub.subset.labels, minlength=3).tolist() == [0, 10, 10]
    with pytest.raises(ConfigError):
        sample_retain_subset(p, 0)
    with pytest.raises(ConfigError):
        sample_retain_subset(p, 3, fraction=0.5)


@given(st.integers(0, 2**63), st.integers(1, 12))
def test_retain_subset_is_zero_glance(seed, per_class):
    p = partition(toy(40, 4), {2})
    sub = sample_retain_subset(p, per_class, seed)
    assert 2 not in set(sub.subset.labels.tolist())
    assert all(c <= per_class for c in np.bincount(sub.subset.labels))
    retain_rows = {r.tobytes() for r in p.retain_set.samples}
    assert all(r.tobytes() in retain_rows for r in sub.subset.samples)


# -- batching ------------------------------------------------------------------

def test_batch_sizes_and_source_order():
    ds = toy(10)
    sizes = [len(y) for _, y in batches(ds, 3)]
    assert sizes == [3, 3, 3, 1]
    labels = np.concatenate([y for _, y in batches(ds, 3)])
    assert np.array_equal(labels, ds.labels)
    with pytest.raises(ConfigError):
        list(batch_indices(5, 0))


@given(st.integers(0, 80), st.integers(1, 17), st.integers(0, 2**64 - 1))
def test_shuffled_batches_are_a_permutation(n, size, seed):
    ds = LabeledDataset(np.arange(n, dtype=float)[:, None], np.arange(n) % 4, 4)
    got = [x.data[:, 0] for x, _ in batches(ds, size, seed)]
    flat = np.concatenate(got) if got else np.zeros(0)
    assert sorted(flat.tolist()) == list(range(n))
    assert Counter(np.concatenate([y for _, y in batches(ds, size, seed)] or [np.zeros(0, int)]).tolist()) == \
        Counter(ds.labels.tolist())


def test_dataset_invariants():
    with pytest.raises(ContractError):
        LabeledDataset(np.zeros((3, 2)), np.array([0, 1]), 2)
    with pytest.raises(ContractError):
        LabeledDataset(np.zeros((2, 2)), np.array([0, 2]), 2)
    ds = toy()
    with pytest.raises(ValueError):
        ds.samples[0, 0, 0, 0] = 5.0
    both = concat([ds, ds])
    assert len(both) == 20


def test_train_test_split_is_stratified_and_disjoint():
    ds = generate_synthetic(SyntheticSpec(5, (3,), 40, 5.0), 0)
    tr, te = train_test_split(ds, 0.25, 1)
    assert np.bincount(te.labels).tolist() == [10] * 5
    assert not set(sample_hashes(tr)) & set(sample_hashes(te))
