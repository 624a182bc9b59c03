"""Account interaction graph and the 22 expert node features.

The graph aggregates parallel transfers into single directed edges whose
weight is the transaction count normalized by the per-graph maximum.
Structural centralities run on the undirected projection; directionality
is already captured by the in/out degree features.

Betweenness uses Brandes' algorithm with numpy-vectorized BFS frontiers
per source, exact up to `EXACT_BETWEENNESS_LIMIT` nodes and pivot-sampled
above that.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .txcorpus import TransactionRecord

SECONDS_PER_DAY = 86400.0
DEFAULT_LONG_WINDOW = 30 * 86400
DEFAULT_SHORT_WINDOW = 86400
EXACT_BETWEENNESS_LIMIT = 50_000
BETWEENNESS_PIVOTS = 256

FEATURE_NAMES = [
    "node_outdegree",
    "node_indegree",
    "max_outgoing_amount",
    "min_outgoing_amount",
    "avg_outgoing_amount",
    "max_incoming_amount",
    "min_incoming_amount",
    "avg_incoming_amount",
    "account_balance",
    "account_lifetime",
    "long_term_incoming_frequency",
    "short_term_incoming_frequency",
    "long_term_outgoing_frequency",
    "short_term_outgoing_frequency",
    "degree_centrality",
    "indegree_centrality",
    "outdegree_centrality",
    "betweenness_centrality",
    "closeness_centrality",
    "eigenvector_centrality",
    "katz_centrality",
    "clustering_coefficient",
]

N_FEATURES = len(FEATURE_NAMES)


class PowerIterationError(ValueError):
    """Raised when eigenvector or Katz iteration fails to converge."""

    def __init__(self, message: str, iterations: int):
        super().__init__(message)
        self.iterations = iterations


@dataclass
class AccountGraph:
    """Directed multigraph collapsed to weighted simple edges, CSR both ways."""

    nodes: list
    out_indptr: np.ndarray
    out_indices: np.ndarray
    out_count: np.ndarray
    out_value: np.ndarray
    out_weight: np.ndarray
    in_indptr: np.ndarray
    in_indices: np.ndarray
    in_count: np.ndarray
    in_value: np.ndarray
    in_weight: np.ndarray
    max_count: float

    def __post_init__(self):
        self.index = {a: i for i, a in enumerate(self.nodes)}

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.out_indices)

    def out_neighbors(self, i: int) -> np.ndarray:
        return self.out_indices[self.out_indptr[i]:self.out_indptr[i + 1]]

    def in_neighbors(self, i: int) -> np.ndarray:
        return self.in_indices[self.in_indptr[i]:self.in_indptr[i + 1]]

    def in_weights(self, i: int) -> np.ndarray:
        return self.in_weight[self.in_indptr[i]:self.in_indptr[i + 1]]


def _csr_from_edges(n: int, pairs: np.ndarray, count: np.ndarray,
                    value: np.ndarray) -> tuple:
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs, count, value = pairs[order], count[order], value[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, pairs[:, 0] + 1, 1)
    indptr = np.cumsum(indptr)
    return indptr, pairs[:, 1].copy(), count, value


def build_graph_from_edges(nodes: Sequence[str], edges: Iterable[tuple]) -> AccountGraph:
    """Edges are (src idx, dst idx, count, value_sum), already aggregated."""
    rows = list(edges)
    if not rows and not nodes:
        raise ValueError("cannot build a graph without nodes")
    n = len(nodes)
    if rows:
        pairs = np.array([(r[0], r[1]) for r in rows], dtype=np.int64)
        count = np.array([r[2] for r in rows], dtype=np.float64)
        value = np.array([r[3] for r in rows], dtype=np.float64)
    else:
        pairs = np.empty((0, 2), dtype=np.int64)
        count = np.empty(0)
        value = np.empty(0)
    out = _csr_from_edges(n, pairs, count, value)
    rev = pairs[:, ::-1] if len(pairs) else pairs
    inn = _csr_from_edges(n, rev, count, value)
    max_count = float(count.max()) if len(count) else 1.0
    return AccountGraph(list(nodes),
                        out[0], out[1], out[2], out[3], out[2] / max_count,
                        inn[0], inn[1], inn[2], inn[3], inn[2] / max_count,
                        max_count)


def build_graph(transfers: Iterable[tuple]) -> AccountGraph:
    """Aggregate raw transfers (sender, receiver, value) into an AccountGraph.

    Accepts (sender, receiver, value[, timestamp]) tuples or
    TransactionRecord objects (whose direction field is ignored; each
    underlying transfer must appear exactly once).
    """
    agg: dict = {}
    names: set = set()
    for t in transfers:
        if isinstance(t, TransactionRecord):
            src, dst, val = t.sender, t.receiver, t.value
        else:
            src, dst, val = t[0], t[1], float(t[2])
        names.add(src)
        names.add(dst)
        key = (src, dst)
        if key in agg:
            agg[key][0] += 1
            agg[key][1] += val
        else:
            agg[key] = [1, val]
    if not names:
        raise ValueError("cannot build a graph from zero transfers")
    nodes = sorted(names)
    index = {a: i for i, a in enumerate(nodes)}
    edges = [(index[s], index[d], c, v) for (s, d), (c, v) in agg.items()]
    return build_graph_from_edges(nodes, edges)


def transfers_from_groups(groups: dict) -> list:
    """Unique transfers from per-account records (outflow copies only)."""
    return [r for recs in groups.values() for r in recs if r.direction > 0]


def load_edge_csv(path: str) -> AccountGraph:
    """CSV edge list with header from,to,count,value_sum."""
    names: set = set()
    rows = []
    with open(path, encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            names.add(row["from"])
            names.add(row["to"])
            rows.append((row["from"], row["to"], float(row["count"]),
                         float(row["value_sum"])))
    if not rows:
        raise ValueError(f"{path}: empty edge list")
    nodes = sorted(names)
    index = {a: i for i, a in enumerate(nodes)}
    edges = [(index[s], index[d], c, v) for s, d, c, v in rows]
    return build_graph_from_edges(nodes, edges)


# ---------------------------------------------------------------------------
# per-account transaction statistics
# ---------------------------------------------------------------------------

def transaction_stats(records: Sequence[TransactionRecord]) -> tuple:
    """Ten statistics plus per-side flags for absent-amount imputation.

    Order: outdegree, indegree, max/min/avg outgoing, max/min/avg
    incoming, balance, lifetime (days). Missing-side amounts are 0.
    Returns (features, no_outgoing, no_incoming).
    """
    out_amts = [r.value for r in records if r.direction > 0]
    in_amts = [r.value for r in records if r.direction < 0]
    stamps = [r.timestamp for r in records]

    def three(amts: list) -> tuple:
        if not amts:
            return 0.0, 0.0, 0.0
        return max(amts), min(amts), sum(amts) / len(amts)

    max_out, min_out, avg_out = three(out_amts)
    max_in, min_in, avg_in = three(in_amts)
    balance = sum(in_amts) - sum(out_amts)
    lifetime = ((max(stamps) - min(stamps)) / SECONDS_PER_DAY) if stamps else 0.0
    feats = (float(len(out_amts)), float(len(in_amts)),
             max_out, min_out, avg_out, max_in, min_in, avg_in,
             balance, lifetime)
    return feats, not out_amts, not in_amts


def transfer_frequencies(records: Sequence[TransactionRecord],
                         long_window: int = DEFAULT_LONG_WINDOW,
                         short_window: int = DEFAULT_SHORT_WINDOW) -> tuple:
    """Transfer counts inside trailing windows ending at the last activity.

    Order: long incoming, short incoming, long outgoing, short outgoing.
    """
    if long_window <= 0 or short_window <= 0 or long_window <= short_window:
        raise ValueError("windows must be positive with long > short")
    if not records:
        return 0.0, 0.0, 0.0, 0.0
    last = max(r.timestamp for r in records)
    counts = [0, 0, 0, 0]
    for r in records:
        incoming = r.direction < 0
        if r.timestamp >= last - long_window:
            counts[0 if incoming else 2] += 1
        if r.timestamp >= last - short_window:
            counts[1 if incoming else 3] += 1
    return tuple(float(c) for c in counts)


# ---------------------------------------------------------------------------
# centralities on the undirected projection
# ---------------------------------------------------------------------------

def undirected_csr(graph: AccountGraph) -> tuple:
    """Symmetric unweighted adjacency (distinct-neighbor union), CSR."""
    n = graph.n
    if graph.n_edges == 0:
        return np.zeros(n + 1, dtype=np.int64), np.empty(0, dtype=np.int64)
    src = np.repeat(np.arange(n), np.diff(graph.out_indptr))
    pairs = np.concatenate([
        np.stack([src, graph.out_indices], axis=1),
        np.stack([graph.out_indices, src], axis=1),
    ])
    pairs = np.unique(pairs, axis=0)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, pairs[:, 0] + 1, 1)
    return np.cumsum(indptr), pairs[:, 1].copy()


def _edges_of(frontier: np.ndarray, indptr: np.ndarray,
              indices: np.ndarray) -> tuple:
    """All (source, neighbor) pairs leaving a frontier set, vectorized."""
    counts = indptr[frontier + 1] - indptr[frontier]
    total = int(counts.sum())
    if total == 0:
        return (np.empty(0, dtype=np.int64),) * 2
    starts = np.repeat(indptr[frontier], counts)
    within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    nbr = indices[starts + within]
    src = np.repeat(frontier, counts)
    return src, nbr


def shortest_path_stats(indptr: np.ndarray, indices: np.ndarray, n: int,
                        sources: Optional[np.ndarray] = None) -> tuple:
    """Brandes dependency accumulation plus per-target distance sums.

    Returns (delta_sums, dist_total, reach_count): delta_sums[v] is the
    sum over processed sources of Brandes' dependency of v; dist_total[v]
    and reach_count[v] accumulate d(s, v) and reachability over sources.
    """
    delta_sums = np.zeros(n)
    dist_total = np.zeros(n)
    reach_count = np.zeros(n)
    if sources is None:
        sources = np.arange(n)
    for s in sources:
        dist = np.full(n, -1, dtype=np.int64)
        sigma = np.zeros(n)
        dist[s] = 0
        sigma[s] = 1.0
        levels = [np.array([s], dtype=np.int64)]
        while True:
            src, nbr = _edges_of(levels[-1], indptr, indices)
            if len(src) == 0:
                break
            fresh = nbr[dist[nbr] < 0]
            if len(fresh):
                dist[fresh] = len(levels)
            onlevel = dist[nbr] == len(levels)
            np.add.at(sigma, nbr[onlevel], sigma[src[onlevel]])
            nxt = np.unique(nbr[onlevel])
            if len(nxt) == 0:
                break
            levels.append(nxt)
        delta = np.zeros(n)
        for level in reversed(levels[1:]):
            w, nbr = _edges_of(level, indptr, indices)
            pred = dist[nbr] == dist[w] - 1
            contrib = (sigma[nbr[pred]] / sigma[w[pred]]) * (1.0 + delta[w[pred]])
            np.add.at(delta, nbr[pred], contrib)
        delta[s] = 0.0
        delta_sums += delta
        found = dist >= 0
        dist_total[found] += dist[found]
        reach_count[found] += 1.0
    return delta_sums, dist_total, reach_count


def betweenness_closeness(graph: AccountGraph,
                          rng: Optional[np.random.Generator] = None) -> tuple:
    """Normalized betweenness and Wasserman-Faust closeness.

    Above EXACT_BETWEENNESS_LIMIT nodes both switch to pivot-sampled
    sources scaled by n/k. Returns (betweenness, closeness, backend).
    """
    n = graph.n
    indptr, indices = undirected_csr(graph)
    if n > EXACT_BETWEENNESS_LIMIT:
        rng = rng if rng is not None else np.random.default_rng(0)
        k = min(BETWEENNESS_PIVOTS, n)
        sources = rng.choice(n, size=k, replace=False)
        backend = f"pivot-{k}"
        scale = n / k
    else:
        sources = None
        backend = "exact"
        scale = 1.0
    delta, dist_total, reach_count = shortest_path_stats(
        indptr, indices, n, sources)
    raw = delta * scale / 2.0  # each unordered pair seen from both endpoints
    denom = (n - 1) * (n - 2) / 2.0
    betweenness = raw / denom if denom > 0 else np.zeros(n)
    reach = np.minimum(reach_count * scale, n)
    dist_total = dist_total * scale
    closeness = np.zeros(n)
    positive = dist_total > 0
    nn = max(n - 1, 1)
    closeness[positive] = ((reach[positive] - 1) / nn) * (
        (reach[positive] - 1) / dist_total[positive])
    return betweenness, closeness, backend


def _csr_segments(indptr: np.ndarray, indices: np.ndarray) -> tuple:
    """Flat (source, neighbor) arrays covering every edge once per direction."""
    n = len(indptr) - 1
    src = np.repeat(np.arange(n), np.diff(indptr))
    return src, indices


def eigenvector_centrality(graph: AccountGraph, tol: float = 1e-10,
                           max_iter: int = 1000) -> tuple:
    """Power iteration, L2-normalized; returns (vector, lambda_max of A).

    Iterates on A + I so bipartite +/- eigenvalue pairs cannot stall the
    method; eigenvectors are unchanged and the eigenvalue shifts by one.
    """
    n = graph.n
    indptr, indices = undirected_csr(graph)
    src, nbr = _csr_segments(indptr, indices)
    x = np.full(n, 1.0 / np.sqrt(n))
    for _ in range(1, max_iter + 1):
        y = x.copy()  # the +I term
        np.add.at(y, src, x[nbr])
        norm = np.linalg.norm(y)
        if norm == 0:
            return x, 0.0
        y /= norm
        if np.abs(y - x).max() < tol:
            ay = np.zeros(n)
            np.add.at(ay, src, y[nbr])
            lam_shifted = float(y @ ay + y @ y)
            vec = y if y[np.abs(y).argmax()] >= 0 else -y
            return vec, lam_shifted - 1.0
        x = y
    raise PowerIterationError(
        f"eigenvector power iteration did not converge in {max_iter} "
        f"iterations", max_iter)


def katz_centrality(graph: AccountGraph, beta: float = 1.0,
                    alpha: Optional[float] = None, tol: float = 1e-10,
                    max_iter: int = 1000, normalized: bool = True) -> np.ndarray:
    """Fixed-point solve of x = beta*1 + alpha*A x on the projection.

    alpha defaults to 0.9 / lambda_max; an edgeless graph has no paths,
    so x is exactly beta everywhere.
    """
    n = graph.n
    indptr, indices = undirected_csr(graph)
    if len(indices) == 0:
        x = np.full(n, beta)
        return x / np.linalg.norm(x) if normalized else x
    if alpha is None:
        _, lam = eigenvector_centrality(graph)
        alpha = 0.9 / lam if lam > 0 else 0.0
    src, nbr = _csr_segments(indptr, indices)
    x = np.full(n, beta)
    for _ in range(1, max_iter + 1):
        y = np.full(n, beta)
        np.add.at(y, src, alpha * x[nbr])
        if np.abs(y - x).max() < tol:
            return y / np.linalg.norm(y) if normalized else y
        x = y
    raise PowerIterationError(
        f"Katz iteration did not converge in {max_iter} iterations", max_iter)


def clustering_coefficients(graph: AccountGraph) -> np.ndarray:
    """Undirected local clustering: closed triangles over possible pairs."""
    n = graph.n
    indptr, indices = undirected_csr(graph)
    neighbor_sets = [frozenset(indices[indptr[i]:indptr[i + 1]].tolist())
                     for i in range(n)]
    out = np.zeros(n)
    for v in range(n):
        nbrs = neighbor_sets[v]
        k = len(nbrs)
        if k < 2:
            continue
        links = sum(len(neighbor_sets[u] & nbrs) for u in nbrs) // 2
        out[v] = 2.0 * links / (k * (k - 1))
    return out


def centralities(graph: AccountGraph) -> tuple:
    """All eight structural features, |V| x 8, plus the backend label."""
    n = graph.n
    nn = max(n - 1, 1)
    indptr, _ = undirected_csr(graph)
    degree_c = np.diff(indptr) / nn
    in_c = np.diff(graph.in_indptr) / nn
    out_c = np.diff(graph.out_indptr) / nn
    betw, close, backend = betweenness_closeness(graph)
    eig, _ = eigenvector_centrality(graph)
    katz = katz_centrality(graph)
    clust = clustering_coefficients(graph)
    return (np.stack([degree_c, in_c, out_c, betw, close, eig, katz, clust],
                     axis=1), backend)


# ---------------------------------------------------------------------------
# feature assembly
# ---------------------------------------------------------------------------

@dataclass
class NodeFeatureMatrix:
    accounts: list
    matrix: np.ndarray            # |V| x 22, z-scored
    mean: np.ndarray              # per column, from train nodes
    std: np.ndarray
    zero_variance: np.ndarray     # bool per column: passed through unscaled
    imputed_counts: np.ndarray    # per column: degenerate values set to 0
    long_window: int
    short_window: int
    betweenness_backend: str


def assemble_features(graph: AccountGraph, groups: dict,
                      train_nodes: Sequence[int],
                      long_window: int = DEFAULT_LONG_WINDOW,
                      short_window: int = DEFAULT_SHORT_WINDOW) -> NodeFeatureMatrix:
    """Full 22-column matrix, z-scored with train-node statistics only."""
    train_nodes = np.asarray(list(train_nodes), dtype=np.int64)
    if len(train_nodes) == 0:
        raise ValueError("z-scoring requires a nonempty train node set")
    n = graph.n
    raw = np.zeros((n, N_FEATURES))
    imputed = np.zeros((n, N_FEATURES), dtype=bool)
    for i, account in enumerate(graph.nodes):
        records = groups.get(account)
        if records is None:
            raise ValueError(f"no transaction records for account {account}")
        stats, no_out, no_in = transaction_stats(records)
        raw[i, 0:10] = stats
        imputed[i, 2:5] = no_out
        imputed[i, 5:8] = no_in
        raw[i, 10:14] = transfer_frequencies(records, long_window, short_window)

    cent, backend = centralities(graph)
    raw[:, 14:22] = cent

    mean = raw[train_nodes].mean(axis=0)
    std = raw[train_nodes].std(axis=0)
    zero_var = std < 1e-12
    scaled = raw.copy()
    cols = ~zero_var
    scaled[:, cols] = (raw[:, cols] - mean[cols]) / std[cols]
    return NodeFeatureMatrix(list(graph.nodes), scaled, mean, std, zero_var,
                             imputed.sum(axis=0), long_window, short_window,
                             backend)


def write_features_csv(path: str, features: NodeFeatureMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["account"] + FEATURE_NAMES)
        for account, row in zip(features.accounts, features.matrix):
            writer.writerow([account] + [f"{x:.10g}" for x in row])


def write_features_metadata(path: str, features: NodeFeatureMatrix) -> None:
    meta = {
        "columns": FEATURE_NAMES,
        "zscore_mean": features.mean.tolist(),
        "zscore_std": features.std.tolist(),
        "zero_variance_columns": [
            FEATURE_NAMES[i] for i in np.flatnonzero(features.zero_variance)],
        "imputed_counts": {
            FEATURE_NAMES[i]: int(c)
            for i, c in enumerate(features.imputed_counts) if c},
        "long_window_seconds": features.long_window,
        "short_window_seconds": features.short_window,
        "betweenness_backend": features.betweenness_backend,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
