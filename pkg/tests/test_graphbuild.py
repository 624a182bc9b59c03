"""Graph construction, expert features, and centrality oracles.

Centralities are checked against independent references: brute-force
shortest-path enumeration for betweenness/closeness, a dense eigensolver
for eigenvector centrality, and a direct linear solve for Katz.
"""

import json

import numpy as np
import pytest

from txfuse import graphbuild as gb
from txfuse.txcorpus import TransactionRecord


def _transfer(src, dst, value=1.0, ts=100):
    return TransactionRecord(src, dst, value, +1, ts)


def _records_for(groups_like):
    """Per-account record dict from (src, dst, value, ts) transfer tuples."""
    groups = {}
    for src, dst, value, ts in groups_like:
        groups.setdefault(src, []).append(
            TransactionRecord(src, dst, value, +1, ts))
        groups.setdefault(dst, []).append(
            TransactionRecord(src, dst, value, -1, ts))
    for recs in groups.values():
        recs.sort(key=lambda r: r.timestamp)
    return groups


def _random_graph(n, p, seed, connected=False):
    rng = np.random.default_rng(seed)
    edges = []
    if connected:
        order = rng.permutation(n)
        for a, b in zip(order, order[1:]):
            edges.append((int(min(a, b)), int(max(a, b))))
    for i in range(n):
        for j in range(i + 1, n):
            if rng.uniform() < p:
                edges.append((i, j))
    edges = sorted(set(edges))
    nodes = [f"n{i:03d}" for i in range(n)]
    rows = [(i, j, 1.0, 1.0) for i, j in edges]
    rows += [(j, i, 1.0, 1.0) for i, j in edges]
    return gb.build_graph_from_edges(nodes, rows), edges


def _adjacency_sets(n, edges):
    adj = {i: set() for i in range(n)}
    for i, j in edges:
        adj[i].add(j)
        adj[j].add(i)
    return adj


def _bfs(adj, s):
    """Distances and shortest-path counts from one source."""
    dist = {s: 0}
    sigma = {s: 1.0}
    frontier = [s]
    while frontier:
        nxt = []
        for u in frontier:
            for w in adj[u]:
                if w not in dist:
                    dist[w] = dist[u] + 1
                    nxt.append(w)
        for w in nxt:
            sigma[w] = sum(sigma[u] for u in adj[w]
                           if dist.get(u) == dist[w] - 1)
        frontier = nxt
    return dist, sigma


def brute_betweenness(n, edges):
    adj = _adjacency_sets(n, edges)
    dist = {}
    sigma = {}
    for s in range(n):
        dist[s], sigma[s] = _bfs(adj, s)
    raw = np.zeros(n)
    for s in range(n):
        for t in range(s + 1, n):
            if t not in dist[s]:
                continue
            d_st = dist[s][t]
            for v in range(n):
                if v in (s, t) or v not in dist[s] or v not in dist[t]:
                    continue
                if dist[s][v] + dist[t][v] == d_st:
                    raw[v] += sigma[s][v] * sigma[t][v] / sigma[s][t]
    denom = (n - 1) * (n - 2) / 2.0
    return raw / denom if denom else raw


def brute_closeness(n, edges):
    adj = _adjacency_sets(n, edges)
    out = np.zeros(n)
    for v in range(n):
        dist, _ = _bfs(adj, v)
        total = sum(dist.values())
        r = len(dist)
        if total > 0:
            out[v] = ((r - 1) / (n - 1)) * ((r - 1) / total)
    return out


def brute_clustering(n, edges):
    adj = _adjacency_sets(n, edges)
    out = np.zeros(n)
    for v in range(n):
        nbrs = sorted(adj[v])
        k = len(nbrs)
        if k < 2:
            continue
        tri = sum(1 for a in range(k) for b in range(a + 1, k)
                  if nbrs[b] in adj[nbrs[a]])
        out[v] = 2.0 * tri / (k * (k - 1))
    return out


def _dense_adjacency(n, edges):
    a = np.zeros((n, n))
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    return a


class TestBuildGraph:

    def test_parallel_transfers_aggregate(self):
        g = gb.build_graph([_transfer("a", "b"), _transfer("a", "b", 3.0, 200)])
        assert g.n == 2 and g.n_edges == 1
        assert g.out_count[0] == 2.0
        assert g.out_value[0] == 4.0

    def test_opposite_directions_stay_distinct(self):
        g = gb.build_graph([_transfer("a", "b"), _transfer("b", "a")])
        assert g.n_edges == 2

    def test_three_transaction_fixture(self):
        g = gb.build_graph([
            _transfer("A", "B", 2.0, 100),
            _transfer("A", "B", 3.0, 200),
            _transfer("B", "C", 1.0, 300),
        ])
        assert g.n == 3 and g.n_edges == 2
        ia, ib = g.index["A"], g.index["B"]
        counts = {}
        for u in range(g.n):
            for pos in range(g.out_indptr[u], g.out_indptr[u + 1]):
                counts[(u, int(g.out_indices[pos]))] = g.out_count[pos]
        assert counts[(ia, ib)] == 2.0
        assert counts[(ib, g.index["C"])] == 1.0

    def test_weights_normalized_by_max_count(self):
        g = gb.build_graph([
            _transfer("a", "b"), _transfer("a", "b", ts=2),
            _transfer("b", "c"),
        ])
        assert g.max_count == 2.0
        assert set(np.round(g.out_weight, 6)) == {1.0, 0.5}
        assert np.all(g.out_weight > 0)

    def test_in_csr_is_transpose_of_out_csr(self):
        g, _ = _random_graph(12, 0.3, seed=4)
        out_edges = set()
        for u in range(g.n):
            for pos in range(g.out_indptr[u], g.out_indptr[u + 1]):
                out_edges.add((u, int(g.out_indices[pos]),
                               float(g.out_count[pos])))
        in_edges = set()
        for v in range(g.n):
            for pos in range(g.in_indptr[v], g.in_indptr[v + 1]):
                in_edges.add((int(g.in_indices[pos]), v,
                              float(g.in_count[pos])))
        assert out_edges == in_edges

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            gb.build_graph([])

    def test_transfers_from_groups_deduplicates(self):
        groups = _records_for([("a", "b", 1.0, 100)])
        transfers = gb.transfers_from_groups(groups)
        assert len(transfers) == 1

    def test_edge_csv_roundtrip(self, tmp_path):
        path = str(tmp_path / "edges.csv")
        with open(path, "w") as fh:
            fh.write("from,to,count,value_sum\na,b,2,4.0\nb,c,1,1.0\n")
        g = gb.load_edge_csv(path)
        assert g.n == 3 and g.n_edges == 2 and g.max_count == 2.0


class TestTransactionStats:

    def test_hand_enumerated_fixture(self):
        groups = _records_for([
            ("A", "B", 2.0, 100), ("A", "B", 3.0, 200), ("B", "C", 1.0, 300)])
        feats, no_out, no_in = gb.transaction_stats(groups["A"])
        assert feats[0] == 2.0 and feats[1] == 0.0
        assert feats[2:5] == (3.0, 2.0, 2.5)
        assert feats[5:8] == (0.0, 0.0, 0.0)
        assert feats[8] == -5.0
        np.testing.assert_allclose(feats[9], 100.0 / 86400.0)
        assert no_in and not no_out

    def test_missing_incoming_flagged(self):
        groups = _records_for([("A", "B", 1.0, 50)])
        _, no_out, no_in = gb.transaction_stats(groups["A"])
        assert no_in and not no_out
        _, no_out_b, no_in_b = gb.transaction_stats(groups["B"])
        assert no_out_b and not no_in_b

    def test_single_transaction_lifetime_zero(self):
        groups = _records_for([("A", "B", 1.0, 777)])
        feats, _, _ = gb.transaction_stats(groups["A"])
        assert feats[9] == 0.0


class TestTransferFrequencies:

    def test_all_inside_short_window(self):
        groups = _records_for([("A", "B", 1.0, 1000), ("A", "B", 1.0, 2000),
                               ("C", "A", 1.0, 3000)])
        freqs = gb.transfer_frequencies(groups["A"])
        assert freqs == (1.0, 1.0, 2.0, 2.0)

    def test_ten_day_spacing_short_window_keeps_last_only(self):
        day = 86400
        groups = _records_for([("X", "A", 1.0, 1 + i * 10 * day)
                               for i in range(4)])
        long_in, short_in, long_out, short_out = gb.transfer_frequencies(
            groups["A"])
        assert short_in == 1.0
        assert long_in == 4.0  # 30-day window reaches the first transfer
        assert long_out == short_out == 0.0

    def test_empty_history_is_all_zero(self):
        assert gb.transfer_frequencies([]) == (0.0, 0.0, 0.0, 0.0)

    def test_window_validation(self):
        with pytest.raises(ValueError):
            gb.transfer_frequencies([], long_window=10, short_window=10)


class TestCentralityExamples:

    def _path_graph(self):
        rows = [(0, 1, 1, 1.0), (1, 0, 1, 1.0), (1, 2, 1, 1.0), (2, 1, 1, 1.0)]
        return gb.build_graph_from_edges(["A", "B", "C"], rows)

    def test_path_center_values(self):
        g = self._path_graph()
        cent, backend = gb.centralities(g)
        b = g.index["B"]
        assert backend == "exact"
        np.testing.assert_allclose(cent[b, 0], 1.0)   # degree centrality
        np.testing.assert_allclose(cent[b, 3], 1.0)   # betweenness
        np.testing.assert_allclose(cent[b, 4], 1.0)   # closeness
        a = g.index["A"]
        np.testing.assert_allclose(cent[a, 3], 0.0)
        np.testing.assert_allclose(cent[a, 4], 2.0 / 3.0)

    def test_triangle_symmetry(self):
        rows = []
        for i, j in ((0, 1), (1, 2), (0, 2)):
            rows += [(i, j, 1, 1.0), (j, i, 1, 1.0)]
        g = gb.build_graph_from_edges(["a", "b", "c"], rows)
        cent, _ = gb.centralities(g)
        np.testing.assert_allclose(cent[:, 7], np.ones(3))  # clustering
        np.testing.assert_allclose(cent[:, 5], np.full(3, 1 / np.sqrt(3)),
                                   atol=1e-9)               # eigenvector

    def test_edgeless_graph(self):
        g = gb.build_graph_from_edges(["a", "b", "c", "d"], [])
        raw_katz = gb.katz_centrality(g, normalized=False)
        np.testing.assert_allclose(raw_katz, np.ones(4))  # beta everywhere
        cent, _ = gb.centralities(g)
        np.testing.assert_allclose(cent[:, 3], np.zeros(4))  # betweenness
        np.testing.assert_allclose(cent[:, 7], np.zeros(4))  # clustering

    def test_nonconvergence_carries_iteration_count(self):
        g = self._path_graph()
        with pytest.raises(gb.PowerIterationError) as err:
            gb.eigenvector_centrality(g, tol=0.0, max_iter=3)
        assert err.value.iterations == 3


class TestCentralityOracles:

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_betweenness_matches_brute_force(self, seed):
        g, edges = _random_graph(30, 0.08, seed)
        cent, _ = gb.centralities(g)
        np.testing.assert_allclose(cent[:, 3], brute_betweenness(30, edges),
                                   atol=1e-9)

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_closeness_matches_brute_force(self, seed):
        g, edges = _random_graph(30, 0.08, seed)
        cent, _ = gb.centralities(g)
        np.testing.assert_allclose(cent[:, 4], brute_closeness(30, edges),
                                   atol=1e-9)

    @pytest.mark.parametrize("seed", [5, 6])
    def test_eigenvector_matches_dense_solver(self, seed):
        g, edges = _random_graph(40, 0.1, seed, connected=True)
        vec, lam = gb.eigenvector_centrality(g)
        a = _dense_adjacency(40, edges)
        w, v = np.linalg.eigh(a)
        oracle = v[:, -1]
        oracle = oracle if oracle[np.abs(oracle).argmax()] >= 0 else -oracle
        np.testing.assert_allclose(vec, oracle, atol=1e-6)
        np.testing.assert_allclose(lam, w[-1], atol=1e-6)

    @pytest.mark.parametrize("seed", [5, 6])
    def test_katz_matches_linear_solve(self, seed):
        g, edges = _random_graph(25, 0.12, seed, connected=True)
        a = _dense_adjacency(25, edges)
        lam = np.linalg.eigvalsh(a)[-1]
        alpha = 0.9 / lam
        katz = gb.katz_centrality(g, alpha=alpha)
        oracle = np.linalg.solve(np.eye(25) - alpha * a, np.ones(25))
        oracle /= np.linalg.norm(oracle)
        np.testing.assert_allclose(katz, oracle, atol=1e-8)

    @pytest.mark.parametrize("seed", [7, 8])
    def test_clustering_matches_brute_force(self, seed):
        g, edges = _random_graph(30, 0.15, seed)
        cent, _ = gb.centralities(g)
        np.testing.assert_allclose(cent[:, 7], brute_clustering(30, edges),
                                   atol=1e-12)

    def test_dependency_sum_identity(self):
        # sum of Brandes deltas = sum over ordered reachable pairs of d-1
        n = 20
        g, edges = _random_graph(n, 0.15, seed=9, connected=True)
        indptr, indices = gb.undirected_csr(g)
        delta, _, _ = gb.shortest_path_stats(indptr, indices, n)
        adj = _adjacency_sets(n, edges)
        expected = 0.0
        for s in range(n):
            dist, _ = _bfs(adj, s)
            expected += sum(d - 1 for t, d in dist.items() if t != s)
        np.testing.assert_allclose(delta.sum(), expected, atol=1e-9)


class TestAssembleFeatures:

    def _fixture(self):
        transfers = [("A", "B", 2.0, 100), ("A", "B", 3.0, 200),
                     ("B", "C", 1.0, 300)]
        groups = _records_for(transfers)
        graph = gb.build_graph([TransactionRecord(s, d, v, +1, t)
                                for s, d, v, t in transfers])
        return graph, groups

    def test_shape_and_no_nans(self):
        graph, groups = self._fixture()
        fm = gb.assemble_features(graph, groups, range(graph.n))
        assert fm.matrix.shape == (3, 22)
        assert np.isfinite(fm.matrix).all()

    def test_train_columns_standardized(self):
        g, edges = _random_graph(25, 0.15, seed=11, connected=True)
        rng = np.random.default_rng(0)
        transfers = []
        for i, j in edges:
            transfers.append((f"n{i:03d}", f"n{j:03d}",
                              float(rng.uniform(0.1, 5.0)),
                              int(rng.integers(1, 10 ** 6))))
        groups = _records_for(transfers)
        train = np.arange(0, 25, 2)
        fm = gb.assemble_features(g, groups, train)
        scaled = ~fm.zero_variance
        np.testing.assert_allclose(
            fm.matrix[train][:, scaled].mean(axis=0),
            np.zeros(scaled.sum()), atol=1e-9)
        np.testing.assert_allclose(
            fm.matrix[train][:, scaled].std(axis=0),
            np.ones(scaled.sum()), atol=1e-9)

    def test_constant_column_passes_through_flagged(self):
        graph, groups = self._fixture()
        fm = gb.assemble_features(graph, groups, range(graph.n))
        # path graph: clustering coefficient is identically zero
        clust = gb.FEATURE_NAMES.index("clustering_coefficient")
        assert fm.zero_variance[clust]
        np.testing.assert_allclose(fm.matrix[:, clust], np.zeros(3))

    def test_empty_train_set_rejected(self):
        graph, groups = self._fixture()
        with pytest.raises(ValueError):
            gb.assemble_features(graph, groups, [])

    def test_missing_account_records_rejected(self):
        graph, groups = self._fixture()
        del groups["C"]
        with pytest.raises(ValueError):
            gb.assemble_features(graph, groups, range(graph.n))

    def test_permutation_equivariance(self):
        base = [("a", "b", 2.0, 100), ("b", "c", 1.0, 200),
                ("c", "a", 4.0, 300), ("a", "c", 0.5, 400)]
        rename = {"a": "zz", "b": "mm", "c": "aa"}
        renamed = [(rename[s], rename[d], v, t) for s, d, v, t in base]

        g1 = gb.build_graph([TransactionRecord(s, d, v, +1, t)
                             for s, d, v, t in base])
        g2 = gb.build_graph([TransactionRecord(s, d, v, +1, t)
                             for s, d, v, t in renamed])
        fm1 = gb.assemble_features(g1, _records_for(base), range(3))
        fm2 = gb.assemble_features(g2, _records_for(renamed), range(3))
        for old, new in rename.items():
            np.testing.assert_allclose(
                fm1.matrix[fm1.accounts.index(old)],
                fm2.matrix[fm2.accounts.index(new)], atol=1e-12)

    def test_csv_and_metadata_export(self, tmp_path):
        graph, groups = self._fixture()
        fm = gb.assemble_features(graph, groups, range(graph.n))
        csv_path = str(tmp_path / "features.csv")
        meta_path = str(tmp_path / "features.meta.json")
        gb.write_features_csv(csv_path, fm)
        gb.write_features_metadata(meta_path, fm)
        with open(csv_path) as fh:
            header = fh.readline().strip().split(",")
        assert header == ["account"] + gb.FEATURE_NAMES
        with open(meta_path) as fh:
            meta = json.load(fh)
        assert meta["columns"] == gb.FEATURE_NAMES
        assert meta["betweenness_backend"] == "exact"
        assert len(meta["zscore_mean"]) == 22
