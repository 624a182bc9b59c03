"""Train/validation/test splitting over labeled accounts.

Two strategies: a stratified random split, and a connected-component
split in which whole components are assigned to one side so no edge
crosses split boundaries. The component route can first downsample the
benign class to a 2:1 ratio against fraud.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .graphbuild import AccountGraph, undirected_csr

DEFAULT_RATIOS = (0.7, 0.1, 0.2)
GIANT_COMPONENT_LIMIT = 0.7


@dataclass
class SplitResult:
    train: tuple
    val: tuple
    test: tuple
    method: str

    def assignment(self) -> dict:
        out = {}
        for name, members in (("train", self.train), ("val", self.val),
                              ("test", self.test)):
            for a in members:
                out[a] = name
        return out

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"method": self.method, "train": list(self.train),
                       "val": list(self.val), "test": list(self.test)},
                      fh, indent=0, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "SplitResult":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]),
                   d["method"])


def _check_ratios(ratios: Sequence[float]) -> None:
    if len(ratios) != 3:
        raise ValueError("need exactly three ratios (train, val, test)")
    if any(r <= 0 for r in ratios):
        raise ValueError("all split ratios must be positive")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")


def _counts(n: int, ratios: Sequence[float]) -> list:
    """Target sizes: round the first two, give the remainder to test."""
    a = int(round(n * ratios[0]))
    b = int(round(n * ratios[1]))
    return [a, b, n - a - b]


def split_random(labels: dict, ratios: Sequence[float] = DEFAULT_RATIOS,
                 rng: Optional[np.random.Generator] = None) -> SplitResult:
    """Stratified shuffle; each class is carved 7:1:2 independently."""
    _check_ratios(ratios)
    rng = rng if rng is not None else np.random.default_rng(0)
    buckets: list = [[], [], []]
    for cls in sorted(set(labels.values())):
        members = sorted(a for a, y in labels.items() if y == cls)
        if len(members) < 3:
            raise ValueError(f"class {cls} has only {len(members)} members; "
                             "need at least 3 to fill every split")
        order = rng.permutation(len(members))
        sizes = _counts(len(members), ratios)
        lo = 0
        for i, size in enumerate(sizes):
            buckets[i].extend(members[j] for j in order[lo:lo + size])
            lo += size
    return SplitResult(tuple(sorted(buckets[0])), tuple(sorted(buckets[1])),
                       tuple(sorted(buckets[2])), "random")


def connected_components(graph: AccountGraph) -> list:
    """Undirected components as sorted arrays of node indices."""
    indptr, indices = undirected_csr(graph)
    seen = np.zeros(graph.n, dtype=bool)
    components = []
    for root in range(graph.n):
        if seen[root]:
            continue
        frontier = np.array([root])
        seen[root] = True
        members = [root]
        while len(frontier):
            starts, stops = indptr[frontier], indptr[frontier + 1]
            nbrs = np.concatenate([indices[a:b]
                                   for a, b in zip(starts, stops)]) \
                if len(frontier) else np.array([], dtype=np.int64)
            nbrs = np.unique(nbrs) if len(nbrs) else nbrs
            new = nbrs[~seen[nbrs]] if len(nbrs) else nbrs
            seen[new] = True
            members.extend(new.tolist())
            frontier = new
        components.append(np.sort(np.array(members, dtype=np.int64)))
    return components


def downsample_benign(labels: dict, ratio: float,
                      rng: np.random.Generator) -> dict:
    """Keep all fraud and a seeded sample of ratio x fraud benign."""
    if ratio <= 0:
        raise ValueError("benign:fraud ratio must be positive")
    fraud = sorted(a for a, y in labels.items() if y == 1)
    benign = sorted(a for a, y in labels.items() if y == 0)
    keep = min(len(benign), int(round(ratio * len(fraud))))
    chosen = rng.choice(len(benign), size=keep, replace=False)
    kept = {benign[i] for i in chosen}
    return {a: y for a, y in labels.items() if y == 1 or a in kept}


def count_cross_split_edges(graph: AccountGraph, assignment: dict) -> int:
    """Edges whose endpoints landed in different splits."""
    crossings = 0
    for u in range(graph.n):
        side = assignment.get(graph.nodes[u])
        for v in graph.out_neighbors(u):
            if assignment.get(graph.nodes[v]) != side:
                crossings += 1
    return crossings


def split_components(graph: AccountGraph, labels: dict,
                     ratios: Sequence[float] = DEFAULT_RATIOS,
                     rng: Optional[np.random.Generator] = None) -> SplitResult:
    """Assign whole components so no edge crosses a split boundary.

    Components are shuffled and dealt by component count toward the
    ratios. A component holding more than 70 % of all nodes makes the
    strategy pointless; that raises with advice to use the random split.
    """
    _check_ratios(ratios)
    rng = rng if rng is not None else np.random.default_rng(0)
    components = connected_components(graph)
    largest = max(len(c) for c in components)
    if largest > GIANT_COMPONENT_LIMIT * graph.n:
        raise ValueError(
            f"largest component holds {largest}/{graph.n} nodes; component "
            "splitting cannot balance that -- use the random split")
    order = rng.permutation(len(components))
    sizes = _counts(len(components), ratios)
    buckets: list = [[], [], []]
    lo = 0
    for i, size in enumerate(sizes):
        for j in order[lo:lo + size]:
            buckets[i].extend(graph.nodes[k] for k in components[j])
        lo += size
    result = SplitResult(tuple(sorted(buckets[0])), tuple(sorted(buckets[1])),
                         tuple(sorted(buckets[2])), "components")
    leaked = count_cross_split_edges(graph, result.assignment())
    if leaked:
        raise AssertionError(f"component split leaked {leaked} edges")
    return result
