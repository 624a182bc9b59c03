"""Mini-batch partitioning and layer-neighbor sampling.

The LABOR sampler draws one uniform variate r_u per source vertex per
layer and includes u in seed v's sampled neighborhood iff
r_u <= c_v * pi_u, with uniform pi and c_v = min(k, d_v) / d_v. Because
all seeds in a batch consult the same r vector, seeds with overlapping
neighborhoods pick overlapping samples, shrinking the number of unique
vertices an epoch touches. The node-wise baseline (NS) instead draws a
fresh without-replacement sample per seed. Both record importance
weights 1 / P(include) so aggregation can be debiased.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .graphbuild import AccountGraph
from .rng import stream


@dataclass
class SampledBlock:
    """One layer of sampled edges flowing src -> dst (dst are the seeds)."""

    layer: int
    seeds: np.ndarray          # global dst ids
    sources: np.ndarray        # unique global ids: seeds plus sampled srcs
    edge_src: np.ndarray       # global ids, one per sampled edge
    edge_dst: np.ndarray
    edge_importance: np.ndarray   # 1 / inclusion probability, >= 1
    edge_graph_weight: np.ndarray  # w_uv from the account graph


@dataclass
class SamplerStats:
    sampler: str
    fanouts: tuple
    mean_vertices: np.ndarray  # per layer, unique sources including seeds
    mean_edges: np.ndarray     # per layer
    iterations_per_second: float


def partition_batches(n_nodes: int, n_batches: int,
                      rng: np.random.Generator) -> list:
    """Random permutation split into near-equal disjoint seed sets."""
    if not 1 <= n_batches <= n_nodes:
        raise ValueError(
            f"need 1 <= batches <= nodes, got {n_batches} for {n_nodes}")
    return np.array_split(rng.permutation(n_nodes), n_batches)


def _neighbor_arrays(graph: AccountGraph, direction: str) -> tuple:
    if direction == "in":
        return graph.in_indptr, graph.in_indices, graph.in_weight
    if direction == "out":
        return graph.out_indptr, graph.out_indices, graph.out_weight
    raise ValueError(f"unknown direction {direction!r}")


def _check_seeds(graph: AccountGraph, seeds: np.ndarray) -> np.ndarray:
    seeds = np.asarray(seeds, dtype=np.int64)
    if len(seeds) == 0:
        raise ValueError("seed set is empty")
    if seeds.min() < 0 or seeds.max() >= graph.n:
        raise ValueError("seed id outside the graph")
    return seeds


def labor_sample(graph: AccountGraph, seeds: Sequence[int], k: int,
                 rng: Optional[np.random.Generator] = None,
                 r: Optional[np.ndarray] = None, layer: int = 0,
                 direction: str = "in") -> SampledBlock:
    """Layer-neighbor sampling with batch-shared per-vertex randomness.

    Either `rng` (to draw the shared r vector) or an explicit `r` must be
    given; passing `r` pins the randomness, which tests use to verify
    that growing the fanout only ever adds neighbors.
    """
    if k < 1:
        raise ValueError("fanout must be >= 1")
    seeds = _check_seeds(graph, seeds)
    indptr, indices, gweights = _neighbor_arrays(graph, direction)
    if r is None:
        if rng is None:
            raise ValueError("labor_sample needs an rng or an r vector")
        r = rng.uniform(size=graph.n)

    degrees = (indptr[seeds + 1] - indptr[seeds]).astype(np.float64)
    counts = (indptr[seeds + 1] - indptr[seeds]).astype(np.int64)
    total = int(counts.sum())
    if total == 0:
        empty = np.empty(0, dtype=np.int64)
        return SampledBlock(layer, seeds, seeds.copy(), empty, empty,
                            np.empty(0), np.empty(0))
    starts = np.repeat(indptr[seeds], counts)
    within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    edge_pos = starts + within
    src = indices[edge_pos]
    dst = np.repeat(seeds, counts)
    c = np.minimum(k, degrees) / np.maximum(degrees, 1.0)
    c_edge = np.repeat(c, counts)
    keep = r[src] <= c_edge
    src, dst, c_edge, edge_pos = (src[keep], dst[keep], c_edge[keep],
                                  edge_pos[keep])
    importance = 1.0 / np.minimum(1.0, c_edge)
    sources = np.unique(np.concatenate([seeds, src]))
    return SampledBlock(layer, seeds, sources, src, dst, importance,
                        gweights[edge_pos])


def ns_sample(graph: AccountGraph, seeds: Sequence[int], k: int,
              rng: np.random.Generator, layer: int = 0,
              direction: str = "in") -> SampledBlock:
    """Node-wise baseline: fresh without-replacement draw per seed."""
    if k < 1:
        raise ValueError("fanout must be >= 1")
    seeds = _check_seeds(graph, seeds)
    indptr, indices, gweights = _neighbor_arrays(graph, direction)
    src_parts = []
    dst_parts = []
    imp_parts = []
    gw_parts = []
    for v in seeds:
        lo, hi = indptr[v], indptr[v + 1]
        d = hi - lo
        if d == 0:
            continue
        m = min(k, int(d))
        if m == d:
            pick = np.arange(lo, hi)
        else:
            pick = lo + rng.choice(d, size=m, replace=False)
        src_parts.append(indices[pick])
        dst_parts.append(np.full(m, v, dtype=np.int64))
        imp_parts.append(np.full(m, d / m))
        gw_parts.append(gweights[pick])
    if not src_parts:
        empty = np.empty(0, dtype=np.int64)
        return SampledBlock(layer, seeds, seeds.copy(), empty, empty,
                            np.empty(0), np.empty(0))
    src = np.concatenate(src_parts)
    return SampledBlock(layer, seeds, np.unique(np.concatenate([seeds, src])),
                        src, np.concatenate(dst_parts),
                        np.concatenate(imp_parts), np.concatenate(gw_parts))


@dataclass
class LayerAdjacency:
    """One sampled layer relabeled to compact local ids for aggregation."""

    dst_global: np.ndarray     # local dst row i corresponds to this global id
    src_global: np.ndarray     # local src column j -> global id
    indptr: np.ndarray         # CSR over dst rows
    src_local: np.ndarray      # per edge, index into src_global
    importance: np.ndarray
    graph_weight: np.ndarray


def build_batch_adjacency(blocks: Sequence[SampledBlock]) -> list:
    """Relabel each layer's edges to compact ids, seeds-major order."""
    layers = []
    for block in blocks:
        dst_ids = block.seeds
        dst_pos = {int(g): i for i, g in enumerate(dst_ids)}
        src_ids = block.sources
        src_pos = {int(g): i for i, g in enumerate(src_ids)}
        try:
            dst_local = np.array([dst_pos[int(g)] for g in block.edge_dst],
                                 dtype=np.int64)
            src_local = np.array([src_pos[int(g)] for g in block.edge_src],
                                 dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"dangling vertex reference {exc}") from exc
        order = np.lexsort((src_local, dst_local))
        dst_local = dst_local[order]
        indptr = np.zeros(len(dst_ids) + 1, dtype=np.int64)
        np.add.at(indptr, dst_local + 1, 1)
        layers.append(LayerAdjacency(
            dst_ids.copy(), src_ids.copy(), np.cumsum(indptr),
            src_local[order], block.edge_importance[order],
            block.edge_graph_weight[order]))
    return layers


def sample_layers(graph: AccountGraph, seeds: np.ndarray, fanouts: Sequence[int],
                  rngs: Sequence[np.random.Generator],
                  sampler: str = "labor", direction: str = "in") -> list:
    """Sample outward: layer i's sources become layer i+1's seeds."""
    blocks = []
    current = np.asarray(seeds, dtype=np.int64)
    for i, k in enumerate(fanouts):
        if sampler == "labor":
            block = labor_sample(graph, current, k, rngs[i], layer=i,
                                 direction=direction)
        elif sampler == "ns":
            block = ns_sample(graph, current, k, rngs[i], layer=i,
                              direction=direction)
        else:
            raise ValueError(f"unknown sampler {sampler!r}")
        blocks.append(block)
        current = block.sources
    return blocks


def sampling_stats(graph: AccountGraph, sampler: str, fanouts: Sequence[int],
                   n_batches: int, trials: int, seed: int = 0,
                   direction: str = "in") -> SamplerStats:
    """Mean per-layer unique vertex/edge counts and wall-clock it/s."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    fanouts = tuple(fanouts)
    v_sums = np.zeros(len(fanouts))
    e_sums = np.zeros(len(fanouts))
    iterations = 0
    t0 = time.perf_counter()
    for trial in range(trials):
        part_rng = stream(seed, f"partition:{trial}")
        for b, seeds in enumerate(partition_batches(graph.n, n_batches,
                                                    part_rng)):
            rngs = [stream(seed, f"sample:{trial}:{b}:{layer}")
                    for layer in range(len(fanouts))]
            blocks = sample_layers(graph, seeds, fanouts, rngs, sampler,
                                   direction)
            for i, block in enumerate(blocks):
                v_sums[i] += len(block.sources)
                e_sums[i] += len(block.edge_src)
            iterations += 1
    elapsed = max(time.perf_counter() - t0, 1e-9)
    return SamplerStats(sampler, fanouts, v_sums / iterations,
                        e_sums / iterations, iterations / elapsed)


def write_bench_csv(path: str, stats: Sequence[SamplerStats]) -> None:
    """One row per sampler run, per-layer counts then throughput."""
    layers = max(len(s.fanouts) for s in stats)
    header = ["sampler", "fanouts"]
    header += [f"V_{i + 1}" for i in range(layers)]
    header += [f"E_{i + 1}" for i in range(layers)]
    header.append("it_per_s")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in stats:
            row = [s.sampler, ":".join(str(f) for f in s.fanouts)]
            row += [f"{v:.2f}" for v in s.mean_vertices]
            row += [""] * (layers - len(s.fanouts))
            row += [f"{e:.2f}" for e in s.mean_edges]
            row += [""] * (layers - len(s.fanouts))
            row.append(f"{s.iterations_per_second:.2f}")
            writer.writerow(row)
