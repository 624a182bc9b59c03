"""Cross-attention fusion of sequence and graph views, plus the classifier.

Each account arrives as a variable-length matrix of token states from the
language model and one graph embedding. Learnable aggregate tokens attend
over the token states to compress them to a fixed number of rows, a gated
linear layer injects the graph view into every row, learnable fusion
tokens attend over those rows, and the mean-pooled result feeds a small
MLP with a two-way softmax. Both upstream encoders stay frozen here; only
fusion and classifier parameters train.

Ablations swap the attention stages for simpler combiners (direct
addition, learnable linear mix) or zero out one input branch, so the
contribution of each piece can be measured with everything else equal.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import numcore as nc
from .rng import stream

ABLATE_MODES = ("none", "add", "linear", "no-graph", "no-lm")

# parameters never updated under each ablation mode
FROZEN = {
    "none": (),
    "add": ("fuse.ws", "fuse.wg", "fuse.b"),
    "linear": (),
    "no-graph": ("fuse.wg",),
    "no-lm": ("fuse.ws",),
}


@dataclass(frozen=True)
class CafnConfig:
    d_s: int            # token-state width from the language model
    d_h: int            # graph embedding width
    d_f: int = 64       # fused width
    k_s: int = 8        # aggregate tokens
    k_f: int = 4        # fusion tokens
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    patience: int = 10
    seed: int = 0
    ablate: str = "none"

    def __post_init__(self):
        if self.k_s < 1 or self.k_f < 1:
            raise ValueError("token counts must be >= 1")
        if self.ablate not in ABLATE_MODES:
            raise ValueError(f"unknown ablation {self.ablate!r}; "
                             f"choose from {ABLATE_MODES}")
        if self.d_f < 2:
            raise ValueError("fused width must be >= 2")
        if self.ablate == "add" and not (self.d_s == self.d_h == self.d_f):
            raise ValueError("direct addition sums the raw view embeddings, "
                             "so it requires d_s == d_h == d_f")


@dataclass
class FusionExample:
    """Frozen inputs for one account."""

    account: str
    tokens: np.ndarray      # (n_tokens, d_s) language-model states
    graph_emb: np.ndarray   # (d_h,)
    label: int
    degenerate: bool = False


@dataclass
class FusedAccount:
    account: str
    z_s: np.ndarray         # (k_s, d_s)
    z_sg: np.ndarray        # (k_s, d_f)
    pooled: np.ndarray      # (d_f,)
    probabilities: np.ndarray  # (2,), sums to 1


@dataclass
class MetricReport:
    precision: float
    recall: float
    f1: float
    balanced_accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    no_positive_predictions: bool = False

    def as_dict(self) -> dict:
        return {
            "precision": self.precision, "recall": self.recall,
            "f1": self.f1, "balanced_accuracy": self.balanced_accuracy,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
        }


@dataclass
class CafnEpochLog:
    epoch: int
    train_loss: float
    val_f1: float
    improved: bool


def make_example(account: str, tokens: np.ndarray, graph_emb: np.ndarray,
                 label: int, d_s: int) -> FusionExample:
    """Wrap raw inputs; empty token sets become one flagged zero row."""
    tokens = np.asarray(tokens, dtype=np.float64)
    degenerate = tokens.size == 0
    if degenerate:
        tokens = np.zeros((1, d_s))
    return FusionExample(account, tokens,
                         np.asarray(graph_emb, dtype=np.float64),
                         int(label), degenerate)


def init_params(config: CafnConfig, rng: np.random.Generator) -> dict:
    ds, dh, df = config.d_s, config.d_h, config.d_f
    p = {
        "agg.tokens": nc.uniform_init(rng, (config.k_s, ds), ds),
        "agg.wq": nc.uniform_init(rng, (ds, ds), ds),
        "agg.wk": nc.uniform_init(rng, (ds, ds), ds),
        "agg.wv": nc.uniform_init(rng, (ds, ds), ds),
        "fuse.ws": nc.uniform_init(rng, (ds, df), ds),
        "fuse.wg": nc.uniform_init(rng, (dh, df), dh),
        "fuse.b": nc.Tensor(np.zeros(df), requires_grad=True),
        "fuse.tokens": nc.uniform_init(rng, (config.k_f, df), df),
        "fuse.wq": nc.uniform_init(rng, (df, df), df),
        "fuse.wk": nc.uniform_init(rng, (df, df), df),
        "fuse.wv": nc.uniform_init(rng, (df, df), df),
        "mix.alpha": nc.Tensor(np.array(0.5), requires_grad=True),
        "mix.beta": nc.Tensor(np.array(0.5), requires_grad=True),
        "clf.w1": nc.uniform_init(rng, (df, df // 2), df),
        "clf.b1": nc.Tensor(np.zeros(df // 2), requires_grad=True),
        "clf.w2": nc.uniform_init(rng, (df // 2, 2), df // 2),
        "clf.b2": nc.Tensor(np.zeros(2), requires_grad=True),
    }
    for name in FROZEN[config.ablate]:
        p[name] = nc.Tensor(np.zeros_like(p[name].data), requires_grad=True)
    return p


def _cross_attention(tokens: nc.Tensor, keys_in: nc.Tensor, wq: nc.Tensor,
                     wk: nc.Tensor, wv: nc.Tensor,
                     key_bias: Optional[np.ndarray] = None) -> nc.Tensor:
    """Queries from the learned tokens, keys/values from the inputs.

    tokens: (k, d); keys_in: (..., T, d). Output (..., k, d). An optional
    additive bias of shape (..., 1, T) excludes padded keys.
    """
    d = tokens.data.shape[-1]
    if keys_in.data.shape[-1] != d:
        raise ValueError(f"attention width mismatch: tokens {d}, "
                         f"inputs {keys_in.data.shape[-1]}")
    q = nc.matmul(tokens, wq)
    k = nc.matmul(keys_in, wk)
    v = nc.matmul(keys_in, wv)
    perm = tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2)
    scores = nc.matmul(q, nc.transpose(k, perm))
    if key_bias is not None:
        scores = nc.add(scores, nc.Tensor(key_bias))
    return nc.matmul(nc.softmax_rows(scores, math.sqrt(d)), v)


def aggregate_semantic(params: dict, tokens: np.ndarray) -> np.ndarray:
    """Compress one account's token states to k_s rows."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise ValueError("token states must be a nonempty (n, d_s) matrix")
    out = _cross_attention(params["agg.tokens"], nc.Tensor(tokens),
                           params["agg.wq"], params["agg.wk"],
                           params["agg.wv"])
    return out.data


def cross_perspective_fuse(params: dict, z_s: np.ndarray,
                           graph_emb: np.ndarray) -> np.ndarray:
    """tanh(W_s z_i + W_g xhat + b) with the graph view on every row."""
    z_s = np.asarray(z_s, dtype=np.float64)
    graph_emb = np.asarray(graph_emb, dtype=np.float64)
    if z_s.shape[-1] != params["fuse.ws"].data.shape[0]:
        raise ValueError("semantic row width does not match W_s")
    if graph_emb.shape[-1] != params["fuse.wg"].data.shape[0]:
        raise ValueError("graph embedding width does not match W_g")
    pre = (z_s @ params["fuse.ws"].data
           + graph_emb @ params["fuse.wg"].data
           + params["fuse.b"].data)
    return np.tanh(pre)


def fuse(params: dict, z_sg: np.ndarray) -> np.ndarray:
    """Fusion-token attention over the k_s rows, mean-pooled to d_f."""
    z_sg = np.asarray(z_sg, dtype=np.float64)
    out = _cross_attention(params["fuse.tokens"], nc.Tensor(z_sg),
                           params["fuse.wq"], params["fuse.wk"],
                           params["fuse.wv"])
    return out.data.mean(axis=0)


def classify(params: dict, pooled: np.ndarray) -> np.ndarray:
    """Two-way class probabilities for one pooled vector."""
    h = np.asarray(pooled, dtype=np.float64) @ params["clf.w1"].data \
        + params["clf.b1"].data
    h = np.maximum(h, 0.0)
    logits = h @ params["clf.w2"].data + params["clf.b2"].data
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass
class _PaddedBatch:
    tokens: np.ndarray    # (B, T, d_s)
    key_bias: np.ndarray  # (B, 1, T), 0 for valid keys, -1e9 for padding
    counts: np.ndarray    # (B, 1) valid token counts
    graph: np.ndarray     # (B, d_h)
    labels: np.ndarray    # (B,)


def _pad_batch(examples: Sequence[FusionExample]) -> _PaddedBatch:
    b = len(examples)
    t = max(len(e.tokens) for e in examples)
    d = examples[0].tokens.shape[1]
    tokens = np.zeros((b, t, d))
    bias = np.full((b, 1, t), -1e9)
    counts = np.zeros((b, 1))
    for i, e in enumerate(examples):
        n = len(e.tokens)
        tokens[i, :n] = e.tokens
        bias[i, 0, :n] = 0.0
        counts[i, 0] = n
    graph = np.stack([e.graph_emb for e in examples])
    labels = np.array([e.label for e in examples], dtype=np.int64)
    return _PaddedBatch(tokens, bias, counts, graph, labels)


def _forward_logits(params: dict, batch: _PaddedBatch,
                    config: CafnConfig) -> nc.Tensor:
    """Batched logits (B, 2) on the active tape."""
    s = nc.Tensor(batch.tokens)
    if config.ablate in ("add", "linear"):
        # row-mean over valid tokens replaces both attention stages
        valid = (batch.key_bias[:, 0, :, None] == 0.0).astype(np.float64)
        summed = nc.reduce_sum(nc.mul(s, nc.Tensor(valid)), axis=1)
        s_mean = nc.div(summed, nc.Tensor(batch.counts))        # (B, d_s)
        if config.ablate == "add":
            # direct addition: the raw view embeddings share one space
            pooled = nc.add(s_mean, nc.Tensor(batch.graph))     # (B, d_f)
        else:
            zs = nc.mul(nc.matmul(s_mean, params["fuse.ws"]),
                        params["mix.alpha"])
            xg = nc.mul(nc.matmul(nc.Tensor(batch.graph), params["fuse.wg"]),
                        params["mix.beta"])
            pre = nc.add(nc.add(zs, xg), params["fuse.b"])
            pooled = nc.tanh(pre)                               # (B, d_f)
    else:
        xg = nc.matmul(nc.Tensor(batch.graph), params["fuse.wg"])  # (B, d_f)
        z_s = _cross_attention(params["agg.tokens"], s, params["agg.wq"],
                               params["agg.wk"], params["agg.wv"],
                               batch.key_bias)                  # (B, k_s, d_s)
        zs = nc.matmul(z_s, params["fuse.ws"])                  # (B, k_s, d_f)
        xg3 = nc.reshape(xg, (len(batch.labels), 1, xg.data.shape[-1]))
        z_sg = nc.tanh(nc.add(nc.add(zs, xg3), params["fuse.b"]))
        fused = _cross_attention(params["fuse.tokens"], z_sg,
                                 params["fuse.wq"], params["fuse.wk"],
                                 params["fuse.wv"])             # (B, k_f, d_f)
        pooled = nc.reduce_mean(fused, axis=1)                  # (B, d_f)
    h = nc.relu(nc.add(nc.matmul(pooled, params["clf.w1"]), params["clf.b1"]))
    return nc.add(nc.matmul(h, params["clf.w2"]), params["clf.b2"])


def class_weighted_nll(logits: nc.Tensor, labels: np.ndarray,
                       class_weights: Optional[np.ndarray] = None) -> nc.Tensor:
    """Cross entropy; per-class weights average as sum(w*l)/sum(w)."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = nc.log_softmax_rows(logits)
    onehot = np.zeros(logits.data.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    nll = nc.mul(nc.reduce_sum(nc.mul(logp, nc.Tensor(onehot)), axis=-1),
                 nc.Tensor(-1.0))
    if class_weights is None:
        return nc.reduce_mean(nll)
    w = np.asarray(class_weights, dtype=np.float64)[labels]
    return nc.div(nc.reduce_sum(nc.mul(nll, nc.Tensor(w))),
                  nc.Tensor(float(w.sum())))


def inverse_frequency_weights(labels: np.ndarray) -> np.ndarray:
    """w_c = N / (2 N_c); balanced data yields [1, 1] exactly."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=2).astype(np.float64)
    if (counts == 0).any():
        raise ValueError("training labels must include both classes")
    return len(labels) / (2.0 * counts)


def metrics(predictions: np.ndarray, labels: np.ndarray) -> MetricReport:
    """Fraud (label 1) is the positive class."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(predictions) != len(labels):
        raise ValueError(f"length mismatch: {len(predictions)} predictions "
                         f"vs {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("cannot score an empty set")
    tp = int(((predictions == 1) & (labels == 1)).sum())
    fp = int(((predictions == 1) & (labels == 0)).sum())
    tn = int(((predictions == 0) & (labels == 0)).sum())
    fn = int(((predictions == 0) & (labels == 1)).sum())
    no_pos_pred = (tp + fp) == 0
    precision = 0.0 if no_pos_pred else tp / (tp + fp)
    recall = 0.0 if (tp + fn) == 0 else tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else \
        2.0 * precision * recall / (precision + recall)
    tpr = recall
    tnr = 0.0 if (tn + fp) == 0 else tn / (tn + fp)
    bacc = 0.5 * (tpr + tnr)
    return MetricReport(precision, recall, f1, bacc, tp, fp, tn, fn,
                        no_pos_pred)


class Cafn:
    """Fusion-classifier parameter bundle."""

    def __init__(self, config: CafnConfig,
                 rng: Optional[np.random.Generator] = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.params = init_params(config, rng)
        self.trained = False

    def predict_proba(self, examples: Sequence[FusionExample]) -> np.ndarray:
        out = np.zeros((len(examples), 2))
        bs = self.config.batch_size
        for lo in range(0, len(examples), bs):
            chunk = examples[lo:lo + bs]
            logits = _forward_logits(self.params, _pad_batch(chunk),
                                     self.config).data
            z = logits - logits.max(axis=-1, keepdims=True)
            e = np.exp(z)
            out[lo:lo + len(chunk)] = e / e.sum(axis=-1, keepdims=True)
        return out

    def predict(self, examples: Sequence[FusionExample]) -> np.ndarray:
        return self.predict_proba(examples).argmax(axis=-1)

    def fused_account(self, example: FusionExample) -> FusedAccount:
        z_s = aggregate_semantic(self.params, example.tokens)
        z_sg = cross_perspective_fuse(self.params, z_s, example.graph_emb)
        pooled = fuse(self.params, z_sg)
        return FusedAccount(example.account, z_s, z_sg, pooled,
                            classify(self.params, pooled))

    def save(self, path: str) -> None:
        arrays = {f"param.{k}": t.data for k, t in self.params.items()}
        arrays["meta.trained"] = np.array([1.0 if self.trained else 0.0])
        cfg = self.config
        arrays["cfg.dims"] = np.array([cfg.d_s, cfg.d_h, cfg.d_f, cfg.k_s,
                                       cfg.k_f], dtype=np.float64)
        arrays["cfg.ablate"] = np.array([ABLATE_MODES.index(cfg.ablate)],
                                        dtype=np.float64)
        nc.save_arrays(path, arrays)

    @classmethod
    def load(cls, path: str) -> "Cafn":
        arrays = nc.load_arrays(path)
        dims = arrays["cfg.dims"].astype(int)
        config = CafnConfig(d_s=dims[0], d_h=dims[1], d_f=dims[2],
                            k_s=dims[3], k_f=dims[4],
                            ablate=ABLATE_MODES[int(arrays["cfg.ablate"][0])])
        model = cls(config)
        for k in model.params:
            model.params[k] = nc.Tensor(arrays[f"param.{k}"],
                                        requires_grad=True)
        model.trained = bool(arrays["meta.trained"][0])
        return model


def _check_examples(examples: Sequence[FusionExample],
                    config: CafnConfig, name: str) -> None:
    if not examples:
        raise ValueError(f"{name} set is empty")
    for e in examples:
        if e.tokens.shape[1] != config.d_s:
            raise ValueError(f"{name} token width {e.tokens.shape[1]} != "
                             f"d_s {config.d_s}")
        if e.graph_emb.shape != (config.d_h,):
            raise ValueError(f"{name} graph embedding must be ({config.d_h},)")
        if e.label not in (0, 1):
            raise ValueError("labels must be 0 or 1")


def train(train_examples: Sequence[FusionExample],
          val_examples: Sequence[FusionExample],
          config: CafnConfig,
          model: Optional[Cafn] = None) -> tuple:
    """Weighted cross-entropy training; keeps the best-validation-F1 state.

    Equal validation F1 goes to the epoch with the lower training loss, so
    a model that saturates a small validation set early still keeps its
    most refined parameters.  Patience counts only strict F1 improvements.
    """
    _check_examples(train_examples, config, "train")
    _check_examples(val_examples, config, "validation")
    labels = np.array([e.label for e in train_examples])
    weights = inverse_frequency_weights(labels)
    if model is None:
        model = Cafn(config, stream(config.seed, "cafn-init"))
    trainable = {k: t for k, t in model.params.items()
                 if k not in FROZEN[config.ablate]}
    opt = nc.Adam(trainable, lr=config.lr)
    val_labels = np.array([e.label for e in val_examples])

    best = {k: t.data.copy() for k, t in model.params.items()}
    best_f1 = -1.0
    best_loss = float("inf")
    since_best = 0
    history: list = []

    for epoch in range(config.epochs):
        order = stream(config.seed, f"cafn-order:{epoch}").permutation(
            len(train_examples))
        total = 0.0
        batches = 0
        for lo in range(0, len(order), config.batch_size):
            chunk = [train_examples[i] for i in order[lo:lo + config.batch_size]]
            batch = _pad_batch(chunk)
            opt.zero_grad()
            with nc.Tape() as tape:
                logits = _forward_logits(model.params, batch, config)
                loss = class_weighted_nll(logits, batch.labels, weights)
            nc.backward(loss, tape)
            opt.step()
            total += float(loss.data)
            batches += 1
        epoch_loss = total / max(batches, 1)
        val_f1 = metrics(model.predict(val_examples), val_labels).f1
        better = val_f1 > best_f1
        improved = better or (val_f1 == best_f1 and epoch_loss < best_loss)
        if improved:
            best_f1 = val_f1
            best_loss = epoch_loss
            best = {k: t.data.copy() for k, t in model.params.items()}
        since_best = 0 if better else since_best + 1
        history.append(CafnEpochLog(epoch, epoch_loss, val_f1, improved))
        if since_best >= config.patience:
            break

    for k, t in model.params.items():
        t.data = best[k].copy()
    model.trained = True
    return model, history


def write_metrics_csv(path: str, rows: dict) -> None:
    """One line per split: Precision, Recall, F1, BAcc."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "Precision", "Recall", "F1", "BAcc"])
        for split, report in rows.items():
            writer.writerow([split, f"{report.precision:.6f}",
                             f"{report.recall:.6f}", f"{report.f1:.6f}",
                             f"{report.balanced_accuracy:.6f}"])
