"""Masked autoencoder over the account graph.

Training masks a fraction of each batch's node feature rows with a
learnable token, encodes the batch through two importance-weighted mean
message-passing layers on sampled in-neighborhoods, re-masks the hidden
rows of masked nodes with a second learnable token, and reconstructs the
original features with a one-layer decoder under scaled cosine error.
Inference drops the decoder and runs the encoder mask-free on full
neighborhoods, so downstream consumers see deterministic embeddings.

A batch needs three sampled hops: the innermost hop feeds the decoder
(seed reconstructions aggregate hidden states of seed neighbors), the
outer two feed the encoder layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import numcore as nc
from .graphbuild import AccountGraph
from .labor import LayerAdjacency, build_batch_adjacency, partition_batches, sample_layers
from .rng import stream

N_HOPS = 3  # decoder hop + two encoder hops


@dataclass(frozen=True)
class MagaeConfig:
    d_node: int = 22
    d_h: int = 64
    mask_ratio: float = 0.6
    gamma: float = 2.0
    fanout: int = 10
    n_batches: Optional[int] = None   # default: ~512 seeds per batch
    epochs: int = 30
    lr: float = 1e-3
    seed: int = 0
    use_importance_weights: bool = True


@dataclass
class NodeMaskPlan:
    """Masked members of one batch's seed set, by position and global id."""

    positions: np.ndarray   # indices into the batch seed array
    node_ids: np.ndarray    # global ids of the masked nodes
    ratio: float

    def __len__(self) -> int:
        return len(self.positions)


def init_params(config: MagaeConfig, rng: np.random.Generator) -> dict:
    dn, dh = config.d_node, config.d_h
    return {
        "x_mask": nc.Tensor(np.zeros(dn), requires_grad=True),
        "enc.w1": nc.uniform_init(rng, (dn, dh), dn),
        "enc.a1": nc.Tensor(np.array(0.25), requires_grad=True),
        "enc.w2": nc.uniform_init(rng, (dh, dh), dh),
        "enc.a2": nc.Tensor(np.array(0.25), requires_grad=True),
        "dmask": nc.Tensor(np.zeros(dh), requires_grad=True),
        "dec.w": nc.uniform_init(rng, (dh, dn), dh),
        "dec.b": nc.Tensor(np.zeros(dn), requires_grad=True),
    }


def draw_mask_plan(seeds: np.ndarray, ratio: float,
                   rng: np.random.Generator) -> NodeMaskPlan:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("mask ratio must lie in [0, 1]")
    m = int(math.floor(ratio * len(seeds) + 0.5))
    positions = np.sort(rng.choice(len(seeds), size=m, replace=False))
    return NodeMaskPlan(positions, np.asarray(seeds)[positions], ratio)


def mask_nodes(x: np.ndarray, ratio: float, rng: np.random.Generator,
               mask_value: np.ndarray) -> tuple:
    """Replace a sampled fraction of rows with the mask token value."""
    plan = draw_mask_plan(np.arange(len(x)), ratio, rng)
    masked = np.array(x, dtype=np.float64, copy=True)
    masked[plan.positions] = mask_value
    return masked, plan


def remask(h: np.ndarray, plan: NodeMaskPlan,
           dmask_value: np.ndarray) -> np.ndarray:
    """Overwrite masked rows of encoder output with the decoder token."""
    out = np.array(h, dtype=np.float64, copy=True)
    out[plan.positions] = dmask_value
    return out


def _masked_feature_tensor(x_rows: np.ndarray, row_ids: np.ndarray,
                           masked_ids: np.ndarray, x_mask: nc.Tensor) -> nc.Tensor:
    """Feature rows with masked nodes swapped for the learnable token."""
    ind = np.isin(row_ids, masked_ids).astype(np.float64)[:, None]
    base = nc.mul(nc.Tensor(x_rows), nc.Tensor(1.0 - ind))
    token = nc.mul(nc.reshape(x_mask, (1, len(x_mask.data))), nc.Tensor(ind))
    return nc.add(base, token)


def _remask_tensor(h: nc.Tensor, row_ids: np.ndarray, masked_ids: np.ndarray,
                   dmask: nc.Tensor) -> nc.Tensor:
    ind = np.isin(row_ids, masked_ids).astype(np.float64)[:, None]
    kept = nc.mul(h, nc.Tensor(1.0 - ind))
    token = nc.mul(nc.reshape(dmask, (1, len(dmask.data))), nc.Tensor(ind))
    return nc.add(kept, token)


def _aggregate(layer: LayerAdjacency, x_src: nc.Tensor, graph: AccountGraph,
               use_importance: bool) -> nc.Tensor:
    """Importance-weighted mean over self plus sampled in-neighbors.

    The numerator sums the self row and debiased neighbor messages; the
    denominator is 1 + the node's TRUE in-degree, so the estimate is
    unbiased for the full-neighborhood mean regardless of fanout.
    """
    n_dst = len(layer.dst_global)
    dst_in_src = np.searchsorted(layer.src_global, layer.dst_global)
    self_rows = nc.gather_rows(x_src, dst_in_src)
    true_deg = (graph.in_indptr[layer.dst_global + 1]
                - graph.in_indptr[layer.dst_global]).astype(np.float64)
    if len(layer.src_local):
        coef = layer.graph_weight * (layer.importance if use_importance
                                     else np.ones_like(layer.importance))
        msgs = nc.mul(nc.gather_rows(x_src, layer.src_local),
                      nc.Tensor(coef[:, None]))
        edge_dst_row = np.repeat(np.arange(n_dst), np.diff(layer.indptr))
        summed = nc.add(self_rows,
                        nc.scatter_add_rows(msgs, edge_dst_row, n_dst))
    else:
        summed = self_rows
    return nc.div(summed, nc.Tensor((1.0 + true_deg)[:, None]))


def encode(layers: Sequence[LayerAdjacency], x_src: nc.Tensor, params: dict,
           graph: AccountGraph, use_importance: bool = True) -> nc.Tensor:
    """Two message-passing layers; outermost adjacency first.

    `x_src` holds feature rows for the outermost layer's source set.
    Output rows follow the innermost layer's destination order.
    """
    if len(layers) != 2:
        raise ValueError(f"encoder expects 2 sampled layers, got {len(layers)}")
    h = x_src
    for i, layer in enumerate(layers, start=1):
        agg = _aggregate(layer, h, graph, use_importance)
        h = nc.prelu(nc.matmul(agg, params[f"enc.w{i}"]), params[f"enc.a{i}"])
    return h


def decode(layer: LayerAdjacency, h_src: nc.Tensor, params: dict,
           graph: AccountGraph, use_importance: bool = True) -> nc.Tensor:
    """One message-passing layer projecting hidden states back to features."""
    agg = _aggregate(layer, h_src, graph, use_importance)
    return nc.add(nc.matmul(agg, params["dec.w"]), params["dec.b"])


def sce_loss(x_target: np.ndarray, z: nc.Tensor, masked_rows: np.ndarray,
             gamma: float) -> tuple:
    """Mean (1 - cos(x_i, z_i))^gamma over masked rows.

    Rows whose target is all-zero have no defined angle; they are
    skipped and counted. Returns (loss, skipped_count).
    """
    if gamma < 1.0:
        raise ValueError("gamma must be >= 1")
    masked_rows = np.asarray(masked_rows, dtype=np.int64)
    if len(masked_rows) == 0:
        raise ValueError("SCE needs at least one masked row")
    targets = np.asarray(x_target, dtype=np.float64)[masked_rows]
    nonzero = np.linalg.norm(targets, axis=1) > 0
    skipped = int((~nonzero).sum())
    if not nonzero.any():
        raise ValueError("every masked target row is zero")
    rows = masked_rows[nonzero]
    cos = nc.cosine_rows(nc.gather_rows(z, rows), nc.Tensor(targets[nonzero]))
    err = nc.pow_const(nc.sub(nc.Tensor(1.0), cos), gamma)
    return nc.reduce_mean(err), skipped


class Magae:
    """Encoder/decoder parameter bundle with checkpoint support."""

    def __init__(self, config: MagaeConfig,
                 rng: Optional[np.random.Generator] = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.params = init_params(config, rng)
        self.trained = False

    def save(self, path: str) -> None:
        arrays = {f"param.{k}": t.data for k, t in self.params.items()}
        arrays["meta.trained"] = np.array([1.0 if self.trained else 0.0])
        for k in ("d_node", "d_h", "gamma", "fanout"):
            arrays[f"cfg.{k}"] = np.array([float(getattr(self.config, k))])
        nc.save_arrays(path, arrays)

    @classmethod
    def load(cls, path: str) -> "Magae":
        arrays = nc.load_arrays(path)
        config = MagaeConfig(
            d_node=int(arrays["cfg.d_node"][0]),
            d_h=int(arrays["cfg.d_h"][0]),
            gamma=float(arrays["cfg.gamma"][0]),
            fanout=int(arrays["cfg.fanout"][0]))
        model = cls(config)
        for k in model.params:
            model.params[k] = nc.Tensor(arrays[f"param.{k}"],
                                        requires_grad=True)
        model.trained = bool(arrays["meta.trained"][0])
        return model


@dataclass
class GaeEpochLog:
    epoch: int
    sce: float
    skipped_zero_rows: int


def _batch_loss(graph: AccountGraph, x: np.ndarray, model: Magae,
                seeds: np.ndarray, plan: NodeMaskPlan,
                rngs: list) -> tuple:
    """Forward pass for one batch; returns (loss, skipped) on the tape."""
    cfg = model.config
    blocks = sample_layers(graph, seeds, (cfg.fanout,) * N_HOPS, rngs)
    dec_adj, enc2_adj, enc1_adj = build_batch_adjacency(blocks)
    x_src = _masked_feature_tensor(x[enc1_adj.src_global], enc1_adj.src_global,
                                   plan.node_ids, model.params["x_mask"])
    h = encode([enc1_adj, enc2_adj], x_src, model.params, graph,
               cfg.use_importance_weights)
    h = _remask_tensor(h, dec_adj.src_global, plan.node_ids,
                       model.params["dmask"])
    z = decode(dec_adj, h, model.params, graph, cfg.use_importance_weights)
    return sce_loss(x[seeds], z, plan.positions, cfg.gamma)


def pretrain(graph: AccountGraph, x: np.ndarray, config: MagaeConfig,
             model: Optional[Magae] = None) -> tuple:
    """Train the autoencoder; returns (model, per-epoch logs)."""
    if config.mask_ratio <= 0.0:
        raise ValueError("mask ratio 0 leaves the reconstruction loss "
                         "undefined; configure a positive ratio")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (graph.n, config.d_node):
        raise ValueError(f"feature matrix must be {(graph.n, config.d_node)}, "
                         f"got {x.shape}")
    if model is None:
        model = Magae(config, stream(config.seed, "magae-init"))
    n_batches = config.n_batches
    if n_batches is None:
        n_batches = max(1, graph.n // 512)
    opt = nc.Adam(model.params, lr=config.lr)
    logs: list = []
    last_good = {k: t.data.copy() for k, t in model.params.items()}

    for epoch in range(config.epochs):
        part_rng = stream(config.seed, f"magae-partition:{epoch}")
        epoch_loss = 0.0
        epoch_skipped = 0
        batches = 0
        for b, seeds in enumerate(partition_batches(graph.n, n_batches,
                                                    part_rng)):
            mask_rng = stream(config.seed, f"magae-mask:{epoch}:{b}")
            plan = draw_mask_plan(seeds, config.mask_ratio, mask_rng)
            if len(plan) == 0:
                continue
            rngs = [stream(config.seed, f"magae-sample:{epoch}:{b}:{layer}")
                    for layer in range(N_HOPS)]
            opt.zero_grad()
            with nc.Tape() as tape:
                loss, skipped = _batch_loss(graph, x, model, seeds, plan, rngs)
            if not np.isfinite(loss.data):
                for k, t in model.params.items():
                    t.data = last_good[k].copy()
                logs.append(GaeEpochLog(epoch, float("nan"), epoch_skipped))
                return model, logs
            nc.backward(loss, tape)
            opt.step()
            epoch_loss += float(loss.data)
            epoch_skipped += skipped
            batches += 1
        logs.append(GaeEpochLog(epoch, epoch_loss / max(batches, 1),
                                epoch_skipped))
        last_good = {k: t.data.copy() for k, t in model.params.items()}

    model.trained = True
    return model, logs


def infer_embeddings(graph: AccountGraph, x: np.ndarray, model: Magae,
                     require_trained: bool = True) -> np.ndarray:
    """Mask-free exact-neighborhood encoder output for every node."""
    if require_trained and not model.trained:
        raise ValueError("autoencoder has not been trained")
    x = np.asarray(x, dtype=np.float64)
    deg = np.diff(graph.in_indptr).astype(np.float64)
    edge_dst = np.repeat(np.arange(graph.n), np.diff(graph.in_indptr))
    h = x
    for i in (1, 2):
        summed = h.copy()
        if len(graph.in_indices):
            msgs = graph.in_weight[:, None] * h[graph.in_indices]
            np.add.at(summed, edge_dst, msgs)
        agg = summed / (1.0 + deg)[:, None]
        pre = agg @ model.params[f"enc.w{i}"].data
        slope = float(model.params[f"enc.a{i}"].data)
        h = np.where(pre > 0, pre, slope * pre)
    return h


def write_embeddings(path: str, accounts: Sequence[str],
                     embeddings: np.ndarray) -> None:
    """Binary embedding matrix with its account id map."""
    arrays = {"embeddings": embeddings,
              "n_accounts": np.array([float(len(accounts))])}
    nc.save_arrays(path, arrays)
    with open(path + ".ids", "w", encoding="utf-8") as fh:
        fh.write("\n".join(accounts) + "\n")


def load_embeddings(path: str) -> tuple:
    arrays = nc.load_arrays(path)
    with open(path + ".ids", encoding="utf-8") as fh:
        accounts = fh.read().splitlines()
    return accounts, arrays["embeddings"]
