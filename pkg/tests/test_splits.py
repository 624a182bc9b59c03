"""Split strategies: stratified random and connected-component."""

import numpy as np
import pytest

from txfuse.graphbuild import build_graph_from_edges
from txfuse.splits import (
    SplitResult,
    connected_components,
    count_cross_split_edges,
    downsample_benign,
    split_components,
    split_random,
)


def labeled(n, n_fraud):
    return {f"a{i:04d}": int(i < n_fraud) for i in range(n)}


def chain_graph(names):
    """One path component over the given node names."""
    edges = [(i, i + 1, 1, 1.0) for i in range(len(names) - 1)]
    return build_graph_from_edges(list(names), edges)


class TestRandom:
    def test_100_gives_70_10_20(self):
        s = split_random(labeled(100, 10), rng=np.random.default_rng(0))
        assert (len(s.train), len(s.val), len(s.test)) == (70, 10, 20)

    def test_partition_is_exact(self):
        labels = labeled(97, 13)
        s = split_random(labels, rng=np.random.default_rng(1))
        union = set(s.train) | set(s.val) | set(s.test)
        assert union == set(labels)
        assert len(s.train) + len(s.val) + len(s.test) == 97

    def test_stratified_within_one(self):
        labels = labeled(100, 10)
        s = split_random(labels, rng=np.random.default_rng(2))
        for members, frac in ((s.train, 0.7), (s.val, 0.1), (s.test, 0.2)):
            fraud = sum(labels[a] for a in members)
            assert abs(fraud - 10 * frac) <= 1

    def test_sizes_within_one_of_ratios(self):
        labels = labeled(83, 11)
        s = split_random(labels, rng=np.random.default_rng(3))
        for members, frac in ((s.train, 0.7), (s.val, 0.1), (s.test, 0.2)):
            assert abs(len(members) - 83 * frac) <= 1

    def test_same_seed_identical(self):
        labels = labeled(60, 9)
        a = split_random(labels, rng=np.random.default_rng(5))
        b = split_random(labels, rng=np.random.default_rng(5))
        assert a == b

    def test_different_seed_differs(self):
        labels = labeled(60, 9)
        a = split_random(labels, rng=np.random.default_rng(5))
        b = split_random(labels, rng=np.random.default_rng(6))
        assert a != b

    def test_small_class_rejected(self):
        with pytest.raises(ValueError, match="at least 3"):
            split_random(labeled(50, 2))

    @pytest.mark.parametrize("ratios", [(0.5, 0.5), (0.7, 0.2, 0.2),
                                        (0.7, 0.3, 0.0)])
    def test_bad_ratios(self, ratios):
        with pytest.raises(ValueError):
            split_random(labeled(30, 5), ratios)


class TestComponents:
    def test_ten_singletons(self):
        g = build_graph_from_edges([f"n{i}" for i in range(10)], [])
        labels = {f"n{i}": i % 2 for i in range(10)}
        s = split_components(g, labels, rng=np.random.default_rng(0))
        assert (len(s.train), len(s.val), len(s.test)) == (7, 1, 2)

    def test_zero_cross_edges_exhaustive(self):
        rng = np.random.default_rng(7)
        names = [f"v{i}" for i in range(60)]
        # 12 chain components of 5
        edges = []
        for c in range(12):
            base = c * 5
            edges.extend((base + i, base + i + 1, 1, 1.0) for i in range(4))
        g = build_graph_from_edges(names, edges)
        labels = {n: rng.integers(0, 2) for n in names}
        s = split_components(g, labels, rng=rng)
        assert count_cross_split_edges(g, s.assignment()) == 0
        for u in range(g.n):
            for v in g.out_neighbors(u):
                assert s.assignment()[g.nodes[u]] == \
                       s.assignment()[g.nodes[v]]

    def test_component_counts_within_one(self):
        # 100 singleton components: targets 70/10/20 exactly
        g = build_graph_from_edges([f"n{i}" for i in range(100)], [])
        labels = {f"n{i}": i % 3 == 0 for i in range(100)}
        s = split_components(g, labels, rng=np.random.default_rng(1))
        for members, target in ((s.train, 70), (s.val, 10), (s.test, 20)):
            assert abs(len(members) - target) <= 1

    def test_whole_components_stay_together(self):
        g = chain_graph([f"c{i}" for i in range(6)])
        g2 = build_graph_from_edges(
            [f"c{i}" for i in range(6)] + ["x0", "x1", "x2", "x3"],
            [(i, i + 1, 1, 1.0) for i in range(5)])
        labels = {n: 0 for n in g2.nodes}
        s = split_components(g2, labels, rng=np.random.default_rng(3))
        chain_sides = {s.assignment()[f"c{i}"] for i in range(6)}
        assert len(chain_sides) == 1

    def test_giant_component_rejected(self):
        g = chain_graph([f"g{i}" for i in range(20)])
        labels = {n: 0 for n in g.nodes}
        with pytest.raises(ValueError, match="random split"):
            split_components(g, labels)

    def test_same_seed_identical(self):
        g = build_graph_from_edges([f"n{i}" for i in range(30)],
                                   [(2 * i, 2 * i + 1, 1, 1.0)
                                    for i in range(15)])
        labels = {n: 0 for n in g.nodes}
        a = split_components(g, labels, rng=np.random.default_rng(9))
        b = split_components(g, labels, rng=np.random.default_rng(9))
        assert a == b

    def test_connected_components_structure(self):
        g = build_graph_from_edges(
            ["a", "b", "c", "d", "e"],
            [(0, 1, 1, 1.0), (3, 4, 2, 0.5)])
        comps = connected_components(g)
        as_sets = sorted(tuple(c) for c in comps)
        assert as_sets == [(0, 1), (2,), (3, 4)]


class TestDownsample:
    def test_two_to_one(self):
        labels = labeled(100, 10)
        out = downsample_benign(labels, 2.0, np.random.default_rng(0))
        assert sum(out.values()) == 10
        assert len(out) == 30

    def test_keeps_all_fraud(self):
        labels = labeled(50, 20)
        out = downsample_benign(labels, 1.0, np.random.default_rng(1))
        assert {a for a, y in out.items() if y == 1} == \
               {a for a, y in labels.items() if y == 1}

    def test_caps_at_available_benign(self):
        labels = labeled(30, 20)
        out = downsample_benign(labels, 5.0, np.random.default_rng(2))
        assert len(out) == 30

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            downsample_benign(labeled(30, 5), 0.0, np.random.default_rng(0))


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        s = split_random(labeled(40, 8), rng=np.random.default_rng(4))
        p = str(tmp_path / "splits.json")
        s.save(p)
        assert SplitResult.load(p) == s

    def test_assignment_covers_everyone(self):
        s = split_random(labeled(40, 8), rng=np.random.default_rng(4))
        assignment = s.assignment()
        assert len(assignment) == 40
        assert set(assignment.values()) == {"train", "val", "test"}
