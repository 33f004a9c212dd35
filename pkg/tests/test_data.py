import numpy as np
import pytest
from scipy import stats

from skymask_fl.data import (
    LabeledDataset,
    PartitionSpec,
    TriggerSpec,
    build_root,
    class_means,
    client_groups,
    embed_trigger,
    gen_synthetic,
    partition_noniid,
    rng_for,
    split,
)
from skymask_fl.exceptions import UsageError


def test_rng_streams_are_independent_of_call_order():
    a = rng_for(3, "x").random()
    rng_for(3, "y").random()
    assert rng_for(3, "x").random() == a
    assert rng_for(3, "x", 1).random() != a


def test_class_means_unit_pairwise_distance():
    M = class_means(4, 10)
    d = np.linalg.norm(M[:, None] - M[None], axis=2)
    np.testing.assert_allclose(d[~np.eye(4, dtype=bool)], 1.0)
    assert np.all(M[:, :6] == 0)
    with pytest.warns(UserWarning):
        class_means(5, 3)


def test_gen_synthetic_stratified_and_deterministic():
    ds = gen_synthetic(3, 8, 300, 0.2, seed=5)
    np.testing.assert_array_equal(ds.class_counts(), [100, 100, 100])
    again = gen_synthetic(3, 8, 300, 0.2, seed=5)
    np.testing.assert_array_equal(ds.X, again.X)
    np.testing.assert_array_equal(ds.y, again.y)
    with pytest.raises(UsageError):
        gen_synthetic(3, 8, 2, 0.2, 0)


def test_nearest_centroid_on_tight_blobs():
    ds = gen_synthetic(2, 5, 400, 0.01, seed=1)
    train, test = split(ds, [200, 200], seed=1)
    cents = np.stack([train.X[train.y == c].mean(axis=0) for c in range(2)])
    pred = np.argmin(np.linalg.norm(test.X[:, None] - cents[None], axis=2), axis=1)
    assert np.mean(pred == test.y) >= 0.99


def test_split_is_disjoint():
    ds = gen_synthetic(3, 4, 90, 0.3, 0)
    parts = split(ds, [50, 30, 10], seed=2)
    ids = np.concatenate([p.ids for p in parts])
    assert len(np.unique(ids)) == 90
    with pytest.raises(UsageError):
        split(ds, [50, 50], seed=0)


def test_full_bias_gives_pure_groups():
    ds = gen_synthetic(3, 4, 300, 0.3, 0)
    clients = partition_noniid(ds, PartitionSpec(3, 1.0, seed=0))
    for g, c in enumerate(clients):
        assert np.all(c.y == g)
        assert len(c) == 100


@pytest.mark.parametrize("bias", [0.0, 0.3, 0.5, 0.9])
def test_partition_covers_every_sample(bias):
    ds = gen_synthetic(3, 4, 500, 0.3, 1)
    clients = partition_noniid(ds, PartitionSpec(7, bias, seed=4))
    assert sum(len(c) for c in clients) == len(ds)
    assert len(np.unique(np.concatenate([c.ids for c in clients]))) == len(ds)
    np.testing.assert_array_equal(client_groups(7, 3), [0, 1, 2, 0, 1, 2, 0])


def test_unbiased_partition_chi_square():
    # bias 1/C with equal group sizes: every class is spread uniformly over clients
    C, n = 3, 6
    passed = 0
    for seed in range(20):
        ds = gen_synthetic(C, 4, 1200, 0.3, seed)
        clients = partition_noniid(ds, PartitionSpec(n, 1.0 / C, seed=seed))
        table = np.stack([c.class_counts() for c in clients])
        _, p, _, _ = stats.chi2_contingency(table)
        passed += p > 0.01
    assert passed >= 18


def test_biased_partition_favours_own_group():
    ds = gen_synthetic(3, 4, 3000, 0.3, 0)
    clients = partition_noniid(ds, PartitionSpec(6, 0.8, seed=0))
    for i, c in enumerate(clients):
        counts = c.class_counts()
        assert np.argmax(counts) == i % 3


def test_build_root():
    pool = gen_synthetic(3, 4, 500, 0.3, 0)
    root = build_root(pool, 100, 0.0, seed=0)
    assert len(root) == 100 and len(np.unique(root.ids)) == 100
    skewed = build_root(pool, 100, 1.0, seed=0, designated_class=2)
    assert np.all(skewed.y == 2)
    half = build_root(pool, 100, 0.5, seed=0, designated_class=1)
    assert np.sum(half.y == 1) >= 50
    with pytest.raises(UsageError):
        build_root(pool, 1000)


def test_embed_trigger():
    ds = gen_synthetic(3, 5, 60, 0.3, 0)
    trig = TriggerSpec((0, 2), 4.0, target=1)
    assert embed_trigger(ds, trig, 0.0) is ds
    full = embed_trigger(ds, trig, 1.0)
    assert np.all(full.y == 1)
    assert np.all(full.X[:, [0, 2]] == 4.0)
    np.testing.assert_array_equal(full.X[:, [1, 3, 4]], ds.X[:, [1, 3, 4]])
    twice = embed_trigger(full, trig, 1.0)
    np.testing.assert_array_equal(twice.X, full.X)
    np.testing.assert_array_equal(twice.y, full.y)
    part = embed_trigger(ds, trig, 0.25, seed=3)
    assert np.sum(np.any(part.X != ds.X, axis=1)) == 15
    with pytest.raises(UsageError):
        embed_trigger(ds, TriggerSpec((9,), 1.0, 0), 1.0)


def test_trigger_rejects_duplicates():
    with pytest.raises(UsageError):
        TriggerSpec((1, 1))


def test_dataset_validation_and_csv(tmp_path):
    with pytest.raises(UsageError):
        LabeledDataset(np.zeros((3, 2)), np.array([0, 1]), 2)
    with pytest.raises(UsageError):
        LabeledDataset(np.zeros((2, 2)), np.array([0, 5]), 2)
    ds = gen_synthetic(3, 4, 30, 0.3, 0)
    path = tmp_path / "d.csv"
    ds.to_csv(path)
    back = LabeledDataset.from_csv(path, 3)
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.y, ds.y)
    assert path.read_text().splitlines()[0] == "d0,d1,d2,d3,label"
