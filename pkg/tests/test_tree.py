import numpy as np
import pytest

from betula.features import (BetulaFeature, DimensionMismatchError, lift_point, merge_betula,
                             merge_birch)
from betula.metrics import absorb_betula, absorb_birch
from betula.tree import CFTree, TreeConfig, split_groups

import oracles


def collect(tree):
    """node id -> (depth, is_leaf, entries)"""
    return {nid: (depth, leaf, entries) for nid, depth, leaf, entries in tree.nodes()}


def subtree_leaves(nodes, nid):
    depth, leaf, entries = nodes[nid]
    if leaf:
        return [f for f, _ in entries]
    out = []
    for _, child in entries:
        out.extend(subtree_leaves(nodes, child))
    return out


def merge_all(features, form):
    acc = features[0]
    for f in features[1:]:
        acc = merge_betula(acc, f) if form == "betula" else merge_birch(acc, f)
    return acc


def check_invariants(tree, X, form):
    cfg = tree.config
    nodes = collect(tree)
    leaf_depths = {depth for depth, leaf, _ in nodes.values() if leaf}
    assert len(leaf_depths) == 1, "leaves at different depths"
    for depth, leaf, entries in nodes.values():
        assert 1 <= len(entries) <= (cfg.leaf_capacity if leaf else cfg.branching_factor)
        if leaf:
            continue
        for f, child in entries:
            agg = merge_all(subtree_leaves(nodes, child), form)
            if form == "betula":
                assert f.weight == agg.weight
                assert np.allclose(f.mean, agg.mean, rtol=1e-10, atol=1e-10)
                assert np.allclose(f.sq_dev, agg.sq_dev, rtol=1e-7, atol=1e-7)
            else:
                assert f.count == agg.count
                assert np.allclose(f.linear_sum, agg.linear_sum, rtol=1e-10)
    leaves = tree.leaf_features()
    assert len(leaves) == len(tree) <= cfg.max_leaf_entries
    n, mean, _ = oracles.two_pass(X)
    root = tree.root_feature()
    if form == "betula":
        assert abs(sum(f.weight for f in leaves) - n) <= 1e-9 * n
        assert np.allclose(root.mean, mean, rtol=1e-9, atol=1e-9)
    else:
        assert sum(f.count for f in leaves) == n
        assert np.allclose(root.center, mean, rtol=1e-9, atol=1e-9)


def _sequence(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    n = int(rng.integers(20, 400))
    k = int(rng.integers(1, 6))
    centers = rng.uniform(-1e3, 1e3, size=(k, d))
    X = centers[rng.integers(0, k, n)] + rng.normal(0, rng.uniform(0.1, 50), size=(n, d))
    cfg = dict(branching_factor=int(rng.integers(2, 6)), leaf_capacity=int(rng.integers(1, 6)),
               max_leaf_entries=int(rng.integers(3, 60)),
               distance=["d0", "d1", "d2", "d3", "d4"][seed % 5],
               absorption=["r", "d", "e"][seed % 3])
    return X, cfg


@pytest.mark.parametrize("seed", range(100))
@pytest.mark.parametrize("form", ["betula", "birch"])
def test_invariants_random_sequences(seed, form):
    X, cfg = _sequence(seed)
    tree = CFTree(form=form, **cfg)
    half = len(X) // 2
    tree.insert_many(X[:half])
    check_invariants(tree, X[:half], form)
    tree.insert_many(X[half:])
    check_invariants(tree, X, form)
    again = CFTree(form=form, **cfg).insert_many(X)
    assert again.dump() == tree.dump()


@pytest.mark.parametrize("seed", range(30))
def test_leaf_self_absorption_within_threshold(seed):
    X, cfg = _sequence(seed)
    cfg["absorption"] = ["r", "d"][seed % 2]
    tree = CFTree(**cfg).insert_many(np.round(X))
    for f in tree.leaf_features():
        if f.weight < 2:
            continue
        # a feature's own spread: split off nothing, evaluate the criterion of the merged set
        half = BetulaFeature(f.weight / 2, f.mean, f.sq_dev / 2)
        value = absorb_betula(cfg["absorption"], half, half)
        assert value <= tree.threshold * (1 + 1e-9) + 1e-12


def test_empty_tree():
    tree = CFTree()
    assert len(tree) == 0 and tree.leaf_features() == [] and tree.root_feature() is None
    assert tree.dump() == ""
    assert tree.rebuild().stats().rebuild_count == 0


def test_single_insert():
    tree = CFTree().insert([1.5, -2.0], weight=3.0)
    (f,) = tree.leaf_features()
    assert f.identical(lift_point([1.5, -2.0], 3.0))
    assert tree.stats().height == 1


def test_coincident_points_absorb_at_zero_threshold():
    tree = CFTree().insert_many([[2.0, 2.0], [2.0, 2.0]])
    (f,) = tree.leaf_features()
    assert f.weight == 2 and not f.sq_dev.any()


def test_distant_points_stay_apart():
    tree = CFTree(initial_threshold=1.0, absorption="r").insert_many([[0.0], [10.0]])
    assert [f.mean[0] for f in tree.leaf_features()] == [0.0, 10.0]


def test_split_farthest_pair():
    feats = [lift_point([x]) for x in (0.0, 1.0, 9.0, 10.0)]
    a, b = split_groups(feats, distance="d0")
    assert a == [0, 1] and b == [2, 3]
    assert split_groups(feats[:2], distance="d4") == ([0], [1])
    same = [lift_point([5.0])] * 4
    a, b = split_groups(same)
    assert a and b


def test_leaf_split_through_insertion():
    tree = CFTree(leaf_capacity=3, branching_factor=3, distance="d0")
    tree.insert_many([[0.0], [1.0], [9.0], [10.0]])
    nodes = collect(tree)
    leaves = [[f.mean[0] for f, _ in e] for _, leaf, e in nodes.values() if leaf]
    assert sorted(leaves) == [[0.0, 1.0], [9.0, 10.0]]
    assert tree.stats().height == 2


def test_rebuild_pairs_neighbours():
    tree = CFTree(max_leaf_entries=3, absorption="r")
    tree.insert_many(np.array([0, 1, 10, 11, 20, 21], dtype=float)[:, None])
    feats = tree.leaf_features()
    assert [f.weight for f in feats] == [2, 2, 2]
    assert [f.mean[0] for f in feats] == [0.5, 10.5, 20.5]
    assert 0.5 <= tree.threshold < 4.5
    assert tree.stats().rebuild_count >= 1


def test_rebuild_preserves_root():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(500, 2)) * 10
    tree = CFTree(max_leaf_entries=10_000).insert_many(X)
    before = tree.root_feature()
    tree.config.max_leaf_entries = 20
    tree.rebuild()
    after = merge_all(tree.leaf_features(), "betula")
    assert len(tree) <= 20
    assert after.weight == before.weight
    assert np.allclose(after.mean, before.mean, rtol=1e-9)
    assert np.allclose(after.sq_dev, before.sq_dev, rtol=1e-9)


def test_separated_points_are_singletons():
    X = np.arange(50, dtype=float)[:, None] * 3.0
    tree = CFTree().insert_many(X)
    assert len(tree) == 50
    assert sorted(f.mean[0] for f in tree.leaf_features()) == list(X[:, 0])


def test_weight_conservation_10k():
    X = np.random.default_rng(0).uniform(-100, 100, size=(10_000, 2))
    tree = CFTree(max_leaf_entries=200).insert_many(X)
    assert sum(f.weight for f in tree.leaf_features()) == pytest.approx(10_000, abs=1e-6)


def test_weighted_points():
    tree = CFTree().insert_many([[0.0], [0.0], [4.0]], sample_weight=[0.5, 1.5, 2.0])
    w = sorted((f.mean[0], f.weight) for f in tree.leaf_features())
    assert w == [(0.0, 2.0), (4.0, 2.0)]
    with pytest.raises(ValueError):
        CFTree(form="birch").insert_many([[0.0]], sample_weight=[0.5])


def test_input_validation():
    tree = CFTree().insert_many(np.zeros((2, 2)))
    with pytest.raises(DimensionMismatchError):
        tree.insert([1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        tree.insert([np.nan, 1.0])
    with pytest.raises(ValueError):
        tree.insert_many(np.zeros((2, 2)), sample_weight=[1.0, -1.0])
    with pytest.raises(ValueError):
        TreeConfig(branching_factor=1)
    with pytest.raises(ValueError):
        TreeConfig(precision="half")


def test_forms_build_same_tree_near_origin():
    rng = np.random.default_rng(12)
    X = np.round(rng.normal(size=(300, 2)) * 20, 2)
    a = CFTree(max_leaf_entries=40).insert_many(X)
    b = CFTree(max_leaf_entries=40, form="birch").insert_many(X)
    assert [f.weight for f in a.leaf_features()] == [f.count for f in b.leaf_features()]
    for fa, fb in zip(a.leaf_features(), b.leaf_features()):
        assert np.allclose(fa.mean, fb.center, rtol=1e-9, atol=1e-9)
    assert b.cancellation_flags == 0


def test_birch_tree_flags_far_from_origin():
    X = np.random.default_rng(1).normal(size=(200, 2)) + 1e8
    tree = CFTree(form="birch", max_leaf_entries=20).insert_many(X)
    assert tree.cancellation_flags > 0
    stable = CFTree(max_leaf_entries=20).insert_many(X)
    assert stable.cancellation_flags == 0


def test_single_precision_rounds_storage():
    X = np.random.default_rng(2).normal(size=(100, 2)) + 1000.0
    tree = CFTree(precision="single", max_leaf_entries=10).insert_many(X)
    for f in tree.leaf_features():
        assert np.all(f.mean.astype(np.float32) == f.mean)
        assert np.all(f.sq_dev.astype(np.float32) == f.sq_dev)


def test_dump_format():
    tree = CFTree(leaf_capacity=2, branching_factor=2).insert_many([[0.0], [5.0], [20.0]])
    lines = tree.dump().splitlines()
    assert lines[0].startswith("I ")
    assert any(line.startswith("  L ") for line in lines)
    assert sum(line.lstrip().startswith("L ") for line in lines) == 3


def test_birch_absorption_in_tree_matches_criterion():
    tree = CFTree(form="birch", initial_threshold=1.0).insert_many([[0.0], [2.0], [10.0]])
    feats = tree.leaf_features()
    assert [f.count for f in feats] == [2, 1]
    assert absorb_birch("r", feats[0]) == pytest.approx(1.0)
