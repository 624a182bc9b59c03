"""Masked language model over transaction sentences.

A small bidirectional transformer is pretrained from scratch with two
objectives: masked-token prediction, and a token-aware contrastive loss
that pulls each masked token's representation toward the same position
computed by the same encoder on the unmasked sequence. The anchor side
is a stop-gradient view of the current weights: it supplies targets but
receives no gradient, so the clean-context representation teaches the
masked-context one and the per-position denominator keeps states spread.

Blocks are pre-norm (residual + sublayer(layernorm(x))) with no final
norm, so a model with zeroed attention and feed-forward weights returns
exactly the embedding + position rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import numcore as nc
from .txcorpus import CLS_ID, MASK_ID, PAD_ID, SEP_ID

SPECIAL_IDS = (PAD_ID, CLS_ID, SEP_ID)

MASK_ACTION, RANDOM_ACTION, KEEP_ACTION = 0, 1, 2


@dataclass(frozen=True)
class TxCLMConfig:
    vocab_size: int
    d_lm: int = 64
    layers: int = 2
    heads: int = 4
    max_seq_len: int = 128
    mask_ratio: float = 0.15
    tau: float = 0.1
    contrastive_weight: float = 1.0
    epochs: int = 5
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.d_lm % self.heads:
            raise ValueError("d_lm must be divisible by the head count")


@dataclass
class MaskPlan:
    """Masked positions with their original ids and per-position action."""

    positions: np.ndarray   # sorted, int64
    originals: np.ndarray   # original token ids at those positions
    actions: np.ndarray     # MASK_ACTION / RANDOM_ACTION / KEEP_ACTION

    def __len__(self) -> int:
        return len(self.positions)


def init_params(config: TxCLMConfig, rng: np.random.Generator) -> dict:
    d, v = config.d_lm, config.vocab_size
    p = {
        "tok_emb": nc.uniform_init(rng, (v, d), d),
        "pos_emb": nc.uniform_init(rng, (config.max_seq_len, d), d),
    }
    for i in range(config.layers):
        for name in ("wq", "wk", "wv", "wo"):
            p[f"layer{i}.attn.{name}"] = nc.uniform_init(rng, (d, d), d)
        p[f"layer{i}.ln1.gain"] = nc.Tensor(np.ones(d), requires_grad=True)
        p[f"layer{i}.ln1.bias"] = nc.Tensor(np.zeros(d), requires_grad=True)
        p[f"layer{i}.ff.w1"] = nc.uniform_init(rng, (d, 4 * d), d)
        p[f"layer{i}.ff.b1"] = nc.Tensor(np.zeros(4 * d), requires_grad=True)
        p[f"layer{i}.ff.w2"] = nc.uniform_init(rng, (4 * d, d), 4 * d)
        p[f"layer{i}.ff.b2"] = nc.Tensor(np.zeros(d), requires_grad=True)
        p[f"layer{i}.ln2.gain"] = nc.Tensor(np.ones(d), requires_grad=True)
        p[f"layer{i}.ln2.bias"] = nc.Tensor(np.zeros(d), requires_grad=True)
    p["mlm.w"] = nc.uniform_init(rng, (d, v), d)
    p["mlm.b"] = nc.Tensor(np.zeros(v), requires_grad=True)
    return p


def encode(ids: np.ndarray, params: dict, config: TxCLMConfig) -> nc.Tensor:
    """Contextual representations for a batch of padded id rows.

    `ids` is (B, n) int; rows with PAD are excluded from attention as
    keys, so padding never influences real tokens. Returns (B, n, d_lm).
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    batch, n = ids.shape
    if n > config.max_seq_len:
        raise ValueError(f"sequence length {n} exceeds {config.max_seq_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError("token id out of vocabulary range")

    d, heads = config.d_lm, config.heads
    dh = d // heads
    x = nc.reshape(nc.gather_rows(params["tok_emb"], ids.ravel()), (batch, n, d))
    x = nc.add(x, nc.narrow(params["pos_emb"], 0, 0, n))

    # additive key mask: PAD columns get a large negative score
    key_mask = np.where(ids == PAD_ID, -1e9, 0.0)[:, None, None, :]
    scale = 1.0 / math.sqrt(dh)

    def split_heads(t: nc.Tensor) -> nc.Tensor:
        return nc.transpose(nc.reshape(t, (batch, n, heads, dh)), (0, 2, 1, 3))

    for i in range(config.layers):
        h = nc.layer_norm(x, params[f"layer{i}.ln1.gain"],
                          params[f"layer{i}.ln1.bias"])
        q = split_heads(nc.matmul(h, params[f"layer{i}.attn.wq"]))
        k = split_heads(nc.matmul(h, params[f"layer{i}.attn.wk"]))
        v = split_heads(nc.matmul(h, params[f"layer{i}.attn.wv"]))
        scores = nc.mul(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))),
                        nc.Tensor(scale))
        att = nc.softmax_rows(nc.add(scores, nc.Tensor(key_mask)))
        ctx = nc.reshape(nc.transpose(nc.matmul(att, v), (0, 2, 1, 3)),
                         (batch, n, d))
        x = nc.add(x, nc.matmul(ctx, params[f"layer{i}.attn.wo"]))

        h2 = nc.layer_norm(x, params[f"layer{i}.ln2.gain"],
                           params[f"layer{i}.ln2.bias"])
        ff = nc.relu(nc.add(nc.matmul(h2, params[f"layer{i}.ff.w1"]),
                            params[f"layer{i}.ff.b1"]))
        ff = nc.add(nc.matmul(ff, params[f"layer{i}.ff.w2"]),
                    params[f"layer{i}.ff.b2"])
        x = nc.add(x, ff)
    return x


def apply_mask(ids: Sequence[int], mask_ratio: float, rng: np.random.Generator,
               vocab_size: int) -> tuple:
    """BERT-style corruption: 80% [MASK], 10% random token, 10% kept."""
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError("mask_ratio must lie in [0, 1]")
    ids = np.asarray(ids, dtype=np.int64)
    maskable = np.flatnonzero(~np.isin(ids, SPECIAL_IDS))
    m = int(math.floor(mask_ratio * len(maskable) + 0.5))
    if m == 0:
        plan = MaskPlan(np.empty(0, np.int64), np.empty(0, np.int64),
                        np.empty(0, np.int64))
        return ids.copy(), plan
    positions = np.sort(rng.choice(maskable, size=m, replace=False))
    u = rng.uniform(size=m)
    actions = np.where(u < 0.8, MASK_ACTION,
                       np.where(u < 0.9, RANDOM_ACTION, KEEP_ACTION))
    masked = ids.copy()
    for pos, act in zip(positions, actions):
        if act == MASK_ACTION:
            masked[pos] = MASK_ID
        elif act == RANDOM_ACTION:
            if vocab_size > 5:
                masked[pos] = rng.integers(5, vocab_size)
    plan = MaskPlan(positions, ids[positions].copy(), actions)
    return masked, plan


def mlm_loss(logits: nc.Tensor, plan: MaskPlan) -> nc.Tensor:
    """Mean negative log-likelihood of the original tokens; 0 if no mask."""
    if len(plan) == 0:
        return nc.Tensor(0.0)
    if logits.shape[0] != len(plan):
        raise ValueError(
            f"expected {len(plan)} logit rows, got {logits.shape[0]}")
    lsm = nc.log_softmax_rows(logits)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(plan)), plan.originals] = 1.0
    picked = nc.reduce_sum(nc.mul(lsm, nc.Tensor(onehot)), axis=-1)
    return nc.mul(nc.reduce_mean(picked), nc.Tensor(-1.0))


def _unit_rows(h: nc.Tensor) -> nc.Tensor:
    sq = nc.reduce_sum(nc.mul(h, h), axis=-1, keepdims=True)
    return nc.div(h, nc.pow_const(nc.add(sq, nc.Tensor(1e-24)), 0.5))


def token_contrastive_loss(h_enh: nc.Tensor, h_anchor: np.ndarray,
                           plan: MaskPlan, tau: float,
                           valid: Optional[np.ndarray] = None) -> nc.Tensor:
    """Cross-entropy over cosine logits against the frozen anchor rows.

    For each masked position i the positive is anchor row i; the
    denominator runs over all valid (non-PAD) positions of the same
    sequence. The anchor side is a constant.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if len(plan) == 0:
        return nc.Tensor(0.0)
    n = h_enh.shape[0]
    anchor = np.asarray(h_anchor, dtype=np.float64)
    anchor = anchor / np.maximum(
        np.linalg.norm(anchor, axis=-1, keepdims=True), 1e-12)

    enh_unit = _unit_rows(nc.gather_rows(h_enh, plan.positions))
    logits = nc.div(nc.matmul(enh_unit, nc.Tensor(anchor.T)), nc.Tensor(tau))
    if valid is not None:
        col_mask = np.where(np.asarray(valid, bool), 0.0, -1e9)[None, :]
        logits = nc.add(logits, nc.Tensor(col_mask))
    lsm = nc.log_softmax_rows(logits)
    onehot = np.zeros((len(plan), n))
    onehot[np.arange(len(plan)), plan.positions] = 1.0
    picked = nc.reduce_sum(nc.mul(lsm, nc.Tensor(onehot)), axis=-1)
    return nc.mul(nc.reduce_mean(picked), nc.Tensor(-1.0))


def mlm_logits(h: nc.Tensor, params: dict, rows: np.ndarray,
               seq_index: np.ndarray) -> nc.Tensor:
    """Vocabulary logits at selected (sequence, position) pairs."""
    batch, n, d = h.shape
    flat = nc.reshape(h, (batch * n, d))
    sel = nc.gather_rows(flat, seq_index * n + rows)
    return nc.add(nc.matmul(sel, params["mlm.w"]), params["mlm.b"])


class TxCLM:
    """Enhanced (trainable) encoder plus its frozen anchor snapshot."""

    def __init__(self, config: TxCLMConfig, rng: Optional[np.random.Generator] = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.params = init_params(config, rng)
        self.anchor = {k: t.data.copy() for k, t in self.params.items()}
        self.trained = False

    def anchor_encode(self, ids: np.ndarray) -> np.ndarray:
        """Anchor representations of the unmasked sequence (no gradient)."""
        frozen = {k: nc.Tensor(v) for k, v in self.anchor.items()}
        return encode(ids, frozen, self.config).data

    def save(self, path: str) -> None:
        arrays = {f"param.{k}": t.data for k, t in self.params.items()}
        arrays["meta.trained"] = np.array([1.0 if self.trained else 0.0])
        for k in ("vocab_size", "d_lm", "layers", "heads", "max_seq_len"):
            arrays[f"cfg.{k}"] = np.array([float(getattr(self.config, k))])
        nc.save_arrays(path, arrays)

    @classmethod
    def load(cls, path: str) -> "TxCLM":
        arrays = nc.load_arrays(path)
        config = TxCLMConfig(
            vocab_size=int(arrays["cfg.vocab_size"][0]),
            d_lm=int(arrays["cfg.d_lm"][0]),
            layers=int(arrays["cfg.layers"][0]),
            heads=int(arrays["cfg.heads"][0]),
            max_seq_len=int(arrays["cfg.max_seq_len"][0]),
        )
        model = cls(config, np.random.default_rng(0))
        for k in model.params:
            model.params[k] = nc.Tensor(arrays[f"param.{k}"], requires_grad=True)
        model.anchor = {k: t.data.copy() for k, t in model.params.items()}
        model.trained = bool(arrays["meta.trained"][0])
        return model


def _pad_batch(seqs: list) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


@dataclass
class EpochLog:
    epoch: int
    mlm: float
    contrastive: float
    combined: float
    empty_mask_batches: int = 0


def pretrain(sequences: Sequence[Sequence[int]], config: TxCLMConfig,
             model: Optional[TxCLM] = None) -> tuple:
    """Train on combined masked-LM + contrastive loss; anchor stays frozen.

    Returns (model, per-epoch logs). A non-finite loss aborts the run and
    restores the last completed epoch's weights.
    """
    if len(sequences) == 0:
        raise ValueError("cannot pretrain on an empty corpus")
    from .rng import stream
    init_rng = stream(config.seed, "txclm-init")
    order_rng = stream(config.seed, "txclm-order")
    mask_rng = stream(config.seed, "txclm-mask")

    if model is None:
        model = TxCLM(config, init_rng)
    opt = nc.Adam(model.params, lr=config.lr)
    logs: list = []
    last_good = {k: t.data.copy() for k, t in model.params.items()}

    for epoch in range(config.epochs):
        order = order_rng.permutation(len(sequences))
        sums = np.zeros(2)
        batches = 0
        empty = 0
        for start in range(0, len(order), config.batch_size):
            chunk = [list(sequences[j]) for j in order[start:start + config.batch_size]]
            masked_rows = []
            plans = []
            for seq in chunk:
                masked, plan = apply_mask(seq, config.mask_ratio, mask_rng,
                                          config.vocab_size)
                masked_rows.append(masked)
                plans.append(plan)
            ids_masked = _pad_batch(masked_rows)
            ids_clean = _pad_batch(chunk)

            rows = np.concatenate([p.positions for p in plans]).astype(np.int64)
            seq_index = np.concatenate([
                np.full(len(p), i, dtype=np.int64) for i, p in enumerate(plans)])
            merged = MaskPlan(
                rows,
                np.concatenate([p.originals for p in plans]).astype(np.int64),
                np.concatenate([p.actions for p in plans]).astype(np.int64))
            if len(merged) == 0:
                empty += 1
                batches += 1
                continue

            use_contrastive = config.contrastive_weight != 0.0
            anchor_reps = model.anchor_encode(ids_clean) if use_contrastive else None

            opt.zero_grad()
            with nc.Tape() as tape:
                h = encode(ids_masked, model.params, config)
                loss_mlm = mlm_loss(
                    mlm_logits(h, model.params, rows, seq_index), merged)
                if use_contrastive:
                    terms = []
                    for i, plan in enumerate(plans):
                        if len(plan) == 0:
                            continue
                        h_i = nc.narrow(h, 0, i, 1)
                        h_i = nc.reshape(h_i, (h.shape[1], h.shape[2]))
                        valid = ids_clean[i] != PAD_ID
                        weight = len(plan) / len(merged)
                        terms.append(nc.mul(
                            token_contrastive_loss(h_i, anchor_reps[i], plan,
                                                   config.tau, valid),
                            nc.Tensor(weight)))
                    loss_ta = terms[0]
                    for t in terms[1:]:
                        loss_ta = nc.add(loss_ta, t)
                    loss = nc.add(loss_mlm, nc.mul(
                        loss_ta, nc.Tensor(config.contrastive_weight)))
                else:
                    loss_ta = nc.Tensor(0.0)
                    loss = loss_mlm

            if not np.isfinite(loss.data):
                for k, t in model.params.items():
                    t.data = last_good[k].copy()
                logs.append(EpochLog(epoch, float("nan"), float("nan"),
                                     float("nan"), empty))
                return model, logs

            nc.backward(loss, tape)
            opt.step()
            sums += (float(loss_mlm.data), float(loss_ta.data))
            batches += 1

        denom = max(batches - empty, 1)
        logs.append(EpochLog(
            epoch, sums[0] / denom, sums[1] / denom,
            (sums[0] + config.contrastive_weight * sums[1]) / denom, empty))
        last_good = {k: t.data.copy() for k, t in model.params.items()}

    model.trained = True
    return model, logs


def account_embedding(ids: Sequence[int], model: TxCLM) -> np.ndarray:
    """Token-level representation matrix for one sentence (no pooling)."""
    if not model.trained:
        raise ValueError("model has not been trained")
    h = encode(np.asarray(ids, dtype=np.int64)[None, :], model.params,
               model.config)
    return h.data[0]


def mean_pairwise_cosine(reps: np.ndarray) -> float:
    """(1/(n(n-1))) sum of cos(h_i, h_j) over all ordered pairs i != j."""
    n = len(reps)
    if n < 2:
        raise ValueError("self-similarity needs at least 2 content tokens")
    unit = reps / np.maximum(np.linalg.norm(reps, axis=1, keepdims=True), 1e-12)
    cos = unit @ unit.T
    return float((cos.sum() - np.trace(cos)) / (n * (n - 1)))


def self_similarity(ids: Sequence[int], params: dict,
                    config: TxCLMConfig) -> float:
    """Mean pairwise cosine of non-special token representations."""
    ids = np.asarray(ids, dtype=np.int64)
    h = encode(ids[None, :], params, config).data[0]
    return mean_pairwise_cosine(h[~np.isin(ids, SPECIAL_IDS)])


def write_training_log(path: str, logs: Sequence[EpochLog]) -> None:
    import csv
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mlm_loss", "contrastive_loss", "combined"])
        for row in logs:
            writer.writerow([row.epoch, f"{row.mlm:.6f}",
                             f"{row.contrastive:.6f}", f"{row.combined:.6f}"])
