import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semifl import data
from semifl.data import LabeledDataset, PartitionSpec, partition, split_server_clients, synth_blobs
from semifl.errors import ConfigError, FormatError, PartitionError


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.integers(0, 256, size=(10, 28 * 28)) / 255.0
    ds = LabeledDataset(x, data.one_hot(rng.integers(0, 10, 10), 10))
    data.write_idx(tmp_path / "img", tmp_path / "lab", ds, (28, 28))
    back = data.load_idx(tmp_path / "img", tmp_path / "lab")
    assert back.x.shape == (10, 784)
    assert np.array_equal(back.x, ds.x) and np.array_equal(back.y, ds.y)


def test_idx_truncated_and_bad_magic(tmp_path):
    ds = LabeledDataset(np.full((3, 4), 0.5), data.one_hot([0, 1, 2], 3))
    data.write_idx(tmp_path / "img", tmp_path / "lab", ds, (2, 2))
    raw = (tmp_path / "img").read_bytes()
    (tmp_path / "short").write_bytes(raw[:-3])
    with pytest.raises(FormatError) as err:
        data.load_idx(tmp_path / "short", tmp_path / "lab", 3)
    assert err.value.offset == len(raw) - 3
    (tmp_path / "bad").write_bytes(struct.pack(">I", 0x0801) + raw[4:])
    with pytest.raises(FormatError):
        data.load_idx(tmp_path / "bad", tmp_path / "lab", 3)


def test_csv_loading_and_errors(tmp_path):
    (tmp_path / "ok.csv").write_text("a,label,b\n1.5,1,2\n0,0,-1\n")
    ds = data.load_csv(tmp_path / "ok.csv")
    assert ds.x.tolist() == [[1.5, 2.0], [0.0, -1.0]]
    assert ds.labels.tolist() == [1, 0]
    (tmp_path / "bad.csv").write_text("a,label\n1,0\n2\n")
    with pytest.raises(FormatError, match="line 3"):
        data.load_csv(tmp_path / "bad.csv")


def test_synth_blobs_is_deterministic_and_balanced():
    a = synth_blobs(103, 5, 10, 3.0, seed=4)
    b = synth_blobs(103, 5, 10, 3.0, seed=4)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    counts = np.bincount(a.labels, minlength=10)
    assert counts.max() - counts.min() <= 1


def test_synth_blobs_means_are_separation_apart():
    ds = synth_blobs(20000, 12, 4, 6.0, seed=0, noise=0.1)
    means = np.stack([ds.x[ds.labels == c].mean(axis=0) for c in range(4)])
    dists = [np.linalg.norm(means[i] - means[j]) for i in range(4) for j in range(i + 1, 4)]
    assert np.allclose(dists, 6.0, atol=0.02)


def test_zero_separation_is_at_chance():
    # Monte-Carlo oracle: a nearest-centroid rule fitted on one draw and scored
    # on another cannot beat 1/K when every class shares a mean
    train = synth_blobs(5000, 3, 5, 0.0, seed=1)
    test = synth_blobs(20000, 3, 5, 0.0, seed=2)
    cents = np.stack([train.x[train.labels == c].mean(axis=0) for c in range(5)])
    pred = np.argmin(((test.x[:, None, :] - cents) ** 2).sum(-1), axis=1)
    assert abs((pred == test.labels).mean() - 0.2) < 0.02


def test_iid_sizes_for_100_over_7():
    parts = partition(np.arange(100), np.zeros(100, int), PartitionSpec("iid", 7, 0))
    assert sorted(len(p) for p in parts) == [14] * 5 + [15] * 2


def test_kclass_infeasible_names_the_class():
    labels = np.array([0] * 10 + [1] * 1)
    with pytest.raises(PartitionError, match="class 1"):
        partition(np.arange(11), labels, PartitionSpec("kclass", 4, 0, k=1))


def test_kclass_k_above_classes():
    with pytest.raises(PartitionError):
        partition(np.arange(6), np.array([0, 1] * 3), PartitionSpec("kclass", 2, 0, k=3))


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["iid", "kclass", "dirichlet"]), st.integers(1, 12), st.integers(0, 2**32 - 1),
       st.floats(0.05, 5.0))
def test_partitions_are_exact_and_reproducible(mode, m, seed, alpha):
    if mode == "kclass":
        m = max(m, 3)  # 6 classes need m * k >= 6 holders
    labels = np.repeat(np.arange(6), 24)
    idx = np.arange(1000, 1000 + len(labels))
    spec = PartitionSpec(mode, m, seed, k=2, alpha=alpha)
    parts = partition(idx, labels, spec)
    assert len(parts) == m
    flat = np.concatenate(parts)
    assert sorted(flat.tolist()) == idx.tolist()
    again = partition(idx, labels, spec)
    assert all(np.array_equal(a, b) for a, b in zip(parts, again))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 3]))
def test_kclass_shards_hold_at_most_k_classes_in_equal_counts(seed, k):
    labels = np.repeat(np.arange(6), 60)
    idx = np.arange(len(labels))
    for p in partition(idx, labels, PartitionSpec("kclass", 6, seed, k=k)):
        counts = np.bincount(labels[p], minlength=6)
        held = counts[counts > 0]
        assert len(held) <= k
        assert len(set(held.tolist())) <= 1


def test_dirichlet_huge_alpha_is_iid_like():
    labels = np.repeat(np.arange(10), 200)
    parts = partition(np.arange(2000), labels, PartitionSpec("dirichlet", 20, 3, alpha=1e6))
    dev = [np.abs(np.bincount(labels[p], minlength=10) / len(p) - 0.1).max() for p in parts]
    assert np.median(dev) <= 0.02


def test_dirichlet_small_alpha_is_more_skewed():
    labels = np.repeat(np.arange(10), 100)

    def skew(alpha, seed):
        parts = partition(np.arange(1000), labels, PartitionSpec("dirichlet", 10, seed, alpha=alpha))
        return np.mean([np.bincount(labels[p], minlength=10).max() / len(p) for p in parts])

    seeds = range(20)
    assert np.mean([skew(0.1, s) for s in seeds]) > np.mean([skew(0.3, s) for s in seeds])


def test_split_server_clients_is_disjoint_and_stratified():
    ds = synth_blobs(1000, 4, 10, 2.0, seed=0)
    server, shards, manifest = split_server_clients(ds, 100, PartitionSpec("iid", 9, 1), seed=2)
    assert np.bincount(server.labels, minlength=10).tolist() == [10] * 10
    all_idx = manifest["server"] + [i for c in manifest["clients"].values() for i in c]
    assert sorted(all_idx) == list(range(1000))
    assert sum(len(s) for s in shards) == 900


def test_one_sample_per_client():
    ds = synth_blobs(50, 2, 5, 2.0, seed=0)
    _, shards, _ = split_server_clients(ds, 40, PartitionSpec("iid", 10, 0), seed=0)
    assert [len(s) for s in shards] == [1] * 10


def test_cifar_scale_arithmetic():
    labels = np.arange(46000) % 10
    parts = partition(np.arange(46000), labels, PartitionSpec("iid", 100, 0))
    assert {len(p) for p in parts} == {460}


def test_server_split_too_small():
    ds = synth_blobs(100, 2, 10, 2.0, seed=0)
    with pytest.raises(ConfigError):
        split_server_clients(ds, 5, PartitionSpec("iid", 2, 0), seed=0)


def test_hidden_labels_only_reach_metrics():
    shard = data.ClientShard(0, np.zeros((3, 2)), data.one_hot([0, 1, 1], 2))
    assert not hasattr(shard, "hidden_y") and not hasattr(shard, "y")
    assert data.pseudo_label_accuracy(shard, np.array([0, 2]), np.array([0, 0])) == (1, 2)
    assert data.shard_label_counts(shard, 2).tolist() == [1, 2]
