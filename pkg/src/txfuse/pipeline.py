"""End-to-end experiment orchestration.

Stages communicate through files in the run's output directory, so each
is independently invokable from the CLI and a full run is just the
stages in order: synthesize (optional), ingest, corpus, language-model
pretraining, expert features, graph-autoencoder pretraining, fusion
training, evaluation. Ablation modes drop or alter stages: `no-lm` and
`no-graph` skip whole branches, `no-cl` zeroes the contrastive weight,
`no-features` swaps expert features for seeded noise, `add` and `linear`
only change the fusion rule.

Every run writes a manifest recording the config hash, seed, stage
statuses, metrics, and artifact checksums. Two runs with equal config
and seed produce manifests identical outside the timing block. A lock
file makes runs exclusive owners of their output directory.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import __version__, cafn, magae, report, txclm, txcorpus
from .cafn import Cafn, CafnEpochLog, FusionExample
from .config import ExperimentConfig
from .graphbuild import (
    AccountGraph,
    N_FEATURES,
    NodeFeatureMatrix,
    assemble_features,
    build_graph,
    build_graph_from_edges,
    transfers_from_groups,
    write_features_csv,
    write_features_metadata,
)
from .labor import sampling_stats
from .magae import GaeEpochLog, Magae
from .numcore import file_sha256
from .rng import stream
from .splits import SplitResult, downsample_benign, split_components, split_random
from .synth import generate, load_labels, write_dataset
from .txclm import SPECIAL_IDS, EpochLog, TxCLM
from .txcorpus import Vocabulary

LOCK_NAME = ".txfuse-lock"

# artifact file names within an output directory
ART = {
    "transactions": "transactions.jsonl",
    "labels": "labels.csv",
    "splits": "splits.json",
    "corpus": "corpus.tsv",
    "vocab": "vocab.json",
    "lm_ckpt": "lm.ckpt",
    "lm_log": "lm_log.csv",
    "features": "features.csv",
    "features_meta": "features_meta.json",
    "gae_ckpt": "gae.ckpt",
    "gae_log": "gae_log.csv",
    "embeddings": "embeddings.bin",
    "cafn_ckpt": "cafn.ckpt",
    "cafn_log": "cafn_log.csv",
    "metrics": "metrics.json",
    "manifest": "manifest.json",
}


def _path(out_dir: str, key: str) -> str:
    return os.path.join(out_dir, ART[key])


@dataclass
class RunLock:
    path: str

    def __enter__(self) -> "RunLock":
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"output directory already owned by another run "
                f"(lock file {self.path} exists)") from None
        os.close(fd)
        return self

    def __exit__(self, *exc) -> None:
        if os.path.exists(self.path):
            os.remove(self.path)


# ---------------------------------------------------------------------------
# shared loading helpers

def _data_paths(cfg: ExperimentConfig, out_dir: str) -> tuple:
    if cfg.synthetic:
        return _path(out_dir, "transactions"), _path(out_dir, "labels")
    return cfg.transactions_path, cfg.labels_path


def _load_world(cfg: ExperimentConfig, out_dir: str) -> tuple:
    """(groups, labels) with labels restricted to ingested accounts."""
    tx_path, labels_path = _data_paths(cfg, out_dir)
    groups, _ = txcorpus.load_transactions(tx_path)
    labels = load_labels(labels_path)
    missing = sorted(a for a in labels if a not in groups)
    if missing:
        raise ValueError(f"{len(missing)} labeled accounts have no "
                         f"transactions, e.g. {missing[:3]}")
    return groups, labels


def _full_graph(groups: dict) -> AccountGraph:
    return build_graph(transfers_from_groups(groups))


def _labeled_graph(groups: dict, labels: dict) -> AccountGraph:
    """Induced graph over labeled accounts only (for component splits)."""
    agg: dict = {}
    for rec in transfers_from_groups(groups):
        if rec.sender in labels and rec.receiver in labels:
            key = (rec.sender, rec.receiver)
            if key in agg:
                agg[key][0] += 1
                agg[key][1] += rec.value
            else:
                agg[key] = [1, rec.value]
    nodes = sorted(labels)
    index = {a: i for i, a in enumerate(nodes)}
    edges = [(index[s], index[d], c, v) for (s, d), (c, v) in agg.items()]
    return build_graph_from_edges(nodes, edges)


def _read_features(path: str) -> tuple:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        accounts, rows = [], []
        for row in reader:
            accounts.append(row[0])
            rows.append([float(x) for x in row[1:]])
    return accounts, np.array(rows)


def _read_lm_log(path: str) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [EpochLog(int(r["epoch"]), float(r["mlm_loss"]),
                         float(r["contrastive_loss"]), float(r["combined"]))
                for r in csv.DictReader(fh)]


def _write_gae_log(path: str, logs: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "sce", "skipped_zero_rows"])
        for l in logs:
            writer.writerow([l.epoch, f"{l.sce:.6f}", l.skipped_zero_rows])


def _read_gae_log(path: str) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [GaeEpochLog(int(r["epoch"]), float(r["sce"]),
                            int(r["skipped_zero_rows"]))
                for r in csv.DictReader(fh)]


def _write_cafn_log(path: str, history: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_f1", "improved"])
        for h in history:
            writer.writerow([h.epoch, f"{h.train_loss:.6f}",
                             f"{h.val_f1:.6f}", int(h.improved)])


def _read_cafn_log(path: str) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [CafnEpochLog(int(r["epoch"]), float(r["train_loss"]),
                             float(r["val_f1"]), bool(int(r["improved"])))
                for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# stages

def stage_synth(cfg: ExperimentConfig, out_dir: str) -> dict:
    spec = cfg.synthetic_spec()
    transactions, labels = generate(spec, cfg.seed)
    write_dataset(out_dir, transactions, labels)
    return {"transactions": len(transactions),
            "accounts": len(labels),
            "fraud": int(sum(labels.values()))}


def stage_ingest(cfg: ExperimentConfig, out_dir: str) -> dict:
    groups, labels = _load_world(cfg, out_dir)
    method = cfg.get("split", "method")
    ratios = cfg.split_ratios()
    if method == "random":
        split = split_random(labels, ratios,
                             stream(cfg.seed, "split-random"))
    elif method == "components":
        down = cfg.get("split", "downsample_benign")
        if down:
            labels = downsample_benign(labels, float(down),
                                       stream(cfg.seed, "split-downsample"))
        split = split_components(_labeled_graph(groups, labels), labels,
                                 ratios, stream(cfg.seed, "split-components"))
    else:
        raise ValueError(f"unknown split method {method!r}")
    split.save(_path(out_dir, "splits"))
    return {"accounts": len(labels),
            "addresses": len(groups),
            "split": {"train": len(split.train), "val": len(split.val),
                      "test": len(split.test), "method": split.method}}


def stage_corpus(cfg: ExperimentConfig, out_dir: str) -> dict:
    groups, labels = _load_world(cfg, out_dir)
    split = SplitResult.load(_path(out_dir, "splits"))
    max_len = cfg.getint("txclm", "max_seq_len")
    sentences = {a: txcorpus.build_sentence(a, groups[a], max_len)
                 for a in sorted(labels)}
    train_sentences = [sentences[a] for a in split.train]
    vocab = txcorpus.build_vocab(train_sentences,
                                 min_freq=cfg.getint("txclm", "min_freq"))
    vocab.save(_path(out_dir, "vocab"))
    txcorpus.write_corpus(_path(out_dir, "corpus"),
                          [sentences[a] for a in sorted(labels)], vocab)
    degenerate = sum(1 for s in sentences.values() if s.degenerate)
    return {"sentences": len(sentences), "vocab_size": len(vocab),
            "degenerate": degenerate}


def stage_pretrain_lm(cfg: ExperimentConfig, out_dir: str) -> dict:
    split = SplitResult.load(_path(out_dir, "splits"))
    corpus = dict(txcorpus.read_corpus(_path(out_dir, "corpus")))
    vocab = Vocabulary.load(_path(out_dir, "vocab"))
    weight = 0.0 if cfg.ablate == "no-cl" else None
    lm_cfg = cfg.txclm_config(len(vocab), contrastive_weight=weight)
    train_ids = [corpus[a] for a in split.train + split.val
                 if len(corpus[a]) > 1]
    model, logs = txclm.pretrain(train_ids, lm_cfg)
    model.save(_path(out_dir, "lm_ckpt"))
    txclm.write_training_log(_path(out_dir, "lm_log"), logs)
    return {"epochs": len(logs),
            "final_mlm": logs[-1].mlm,
            "final_contrastive": logs[-1].contrastive,
            "contrastive_weight": lm_cfg.contrastive_weight}


def stage_features(cfg: ExperimentConfig, out_dir: str) -> dict:
    groups, labels = _load_world(cfg, out_dir)
    split = SplitResult.load(_path(out_dir, "splits"))
    graph = _full_graph(groups)
    long_w, short_w = cfg.feature_windows()
    if cfg.ablate == "no-features":
        rng = stream(cfg.seed, "ablate-features")
        features = NodeFeatureMatrix(
            list(graph.nodes), rng.normal(size=(graph.n, N_FEATURES)),
            np.zeros(N_FEATURES), np.ones(N_FEATURES),
            np.zeros(N_FEATURES, dtype=bool),
            np.zeros(N_FEATURES, dtype=np.int64),
            long_w, short_w, "randomized")
    else:
        train_idx = [graph.index[a] for a in split.train]
        features = assemble_features(graph, groups, train_idx, long_w, short_w)
    write_features_csv(_path(out_dir, "features"), features)
    write_features_metadata(_path(out_dir, "features_meta"), features)
    return {"nodes": graph.n, "edges": graph.n_edges,
            "backend": features.betweenness_backend,
            "zero_variance_columns": int(features.zero_variance.sum())}


def stage_pretrain_gae(cfg: ExperimentConfig, out_dir: str) -> dict:
    groups, _ = _load_world(cfg, out_dir)
    graph = _full_graph(groups)
    accounts, x = _read_features(_path(out_dir, "features"))
    if accounts != list(graph.nodes):
        raise ValueError("feature rows do not match the account graph")
    gae_cfg = cfg.magae_config()
    model, logs = magae.pretrain(graph, x, gae_cfg)
    model.save(_path(out_dir, "gae_ckpt"))
    _write_gae_log(_path(out_dir, "gae_log"), logs)
    emb = magae.infer_embeddings(graph, x, model)
    magae.write_embeddings(_path(out_dir, "embeddings"), graph.nodes, emb)
    return {"epochs": len(logs), "final_sce": logs[-1].sce,
            "embedding_dim": emb.shape[1]}


def _token_states(model: TxCLM, sequences: dict) -> dict:
    """Non-special final-layer states per account, batch-encoded."""
    accounts = sorted(sequences)
    out = {}
    batch_size = max(1, model.config.batch_size)
    for lo in range(0, len(accounts), batch_size):
        chunk = accounts[lo:lo + batch_size]
        ids = txclm._pad_batch([sequences[a] for a in chunk])
        h = txclm.encode(ids, model.params, model.config).data
        for i, a in enumerate(chunk):
            row_ids = np.asarray(sequences[a], dtype=np.int64)
            keep = ~np.isin(row_ids, SPECIAL_IDS)
            out[a] = h[i, :len(row_ids)][keep]
    return out


def _cafn_mode(ablate: str) -> str:
    return ablate if ablate in cafn.ABLATE_MODES else "none"


def build_examples(cfg: ExperimentConfig, out_dir: str) -> tuple:
    """FusionExamples for every labeled account, plus the CAFN dims."""
    _, labels = _load_world(cfg, out_dir)
    ablate = cfg.ablate
    d_s = cfg.getint("txclm", "d_lm")
    d_h = cfg.getint("magae", "d_h")

    states: dict = {}
    if ablate != "no-lm":
        model = TxCLM.load(_path(out_dir, "lm_ckpt"))
        corpus = dict(txcorpus.read_corpus(_path(out_dir, "corpus")))
        states = _token_states(model, {a: corpus[a] for a in labels})
        d_s = model.config.d_lm

    emb_map: dict = {}
    if ablate != "no-graph":
        accounts, emb = magae.load_embeddings(_path(out_dir, "embeddings"))
        emb_map = {a: emb[i] for i, a in enumerate(accounts)}
        d_h = emb.shape[1]

    examples = {}
    for a in sorted(labels):
        tokens = states.get(a, np.zeros((0,)))
        graph_emb = emb_map.get(a, np.zeros(d_h))
        examples[a] = cafn.make_example(a, tokens, graph_emb, labels[a], d_s)
    return examples, d_s, d_h


def stage_fuse_train(cfg: ExperimentConfig, out_dir: str) -> dict:
    examples, d_s, d_h = build_examples(cfg, out_dir)
    split = SplitResult.load(_path(out_dir, "splits"))
    cafn_cfg = cfg.cafn_config(d_s, d_h, _cafn_mode(cfg.ablate))
    model, history = cafn.train([examples[a] for a in split.train],
                                [examples[a] for a in split.val], cafn_cfg)
    model.save(_path(out_dir, "cafn_ckpt"))
    _write_cafn_log(_path(out_dir, "cafn_log"), history)
    return {"epochs": len(history),
            "best_val_f1": max(h.val_f1 for h in history),
            "ablate": cafn_cfg.ablate}


def stage_evaluate(cfg: ExperimentConfig, out_dir: str) -> dict:
    examples, _, _ = build_examples(cfg, out_dir)
    split = SplitResult.load(_path(out_dir, "splits"))
    model = Cafn.load(_path(out_dir, "cafn_ckpt"))
    reports = {}
    for name, members in (("train", split.train), ("val", split.val),
                          ("test", split.test)):
        exs = [examples[a] for a in members]
        preds = model.predict(exs)
        reports[name] = cafn.metrics(preds, np.array([e.label for e in exs]))
    report.write_reports(out_dir, reports)
    _render_run_figures(cfg, out_dir, reports)
    return {name: r.as_dict() for name, r in reports.items()}


def _render_run_figures(cfg: ExperimentConfig, out_dir: str,
                        reports: dict) -> None:
    ablate = cfg.ablate
    lm_logs = gae_logs = None
    self_sim = None
    if ablate != "no-lm":
        lm_logs = _read_lm_log(_path(out_dir, "lm_log"))
        split = SplitResult.load(_path(out_dir, "splits"))
        model = TxCLM.load(_path(out_dir, "lm_ckpt"))
        corpus = dict(txcorpus.read_corpus(_path(out_dir, "corpus")))
        sims = []
        for a in split.test[:64]:
            ids = np.asarray(corpus[a], dtype=np.int64)
            if (~np.isin(ids, SPECIAL_IDS)).sum() >= 2:
                sims.append(txclm.self_similarity(ids, model.params,
                                                  model.config))
        if sims:
            self_sim = np.array(sims)[None, :]
    if ablate != "no-graph":
        gae_logs = _read_gae_log(_path(out_dir, "gae_log"))
    stats = None
    if ablate != "no-graph":
        groups, _ = _load_world(cfg, out_dir)
        graph = _full_graph(groups)
        fanouts = tuple(int(x) for x in cfg.get("sampler", "fanouts").split())
        stats = [sampling_stats(graph, s, fanouts, n_batches=8, trials=2,
                                seed=cfg.seed) for s in ("labor", "ns")]
    report.render_figures(
        out_dir, lm_logs=lm_logs, gae_logs=gae_logs,
        cafn_history=_read_cafn_log(_path(out_dir, "cafn_log")),
        test_report=reports["test"], self_sim=self_sim, sampler_stats=stats)


# ---------------------------------------------------------------------------
# orchestration

def stage_list(cfg: ExperimentConfig) -> list:
    stages: list = []
    if cfg.synthetic:
        stages.append(("synth", stage_synth))
    stages.append(("ingest", stage_ingest))
    ablate = cfg.ablate
    if ablate != "no-lm":
        stages.append(("corpus", stage_corpus))
        stages.append(("pretrain-lm", stage_pretrain_lm))
    if ablate != "no-graph":
        stages.append(("features", stage_features))
        stages.append(("pretrain-gae", stage_pretrain_gae))
    stages.append(("fuse-train", stage_fuse_train))
    stages.append(("evaluate", stage_evaluate))
    return stages


def _checksums(out_dir: str) -> dict:
    out = {}
    for key in ("corpus", "vocab", "lm_ckpt", "features", "gae_ckpt",
                "embeddings", "cafn_ckpt", "metrics"):
        p = _path(out_dir, key)
        if os.path.exists(p):
            out[ART[key]] = file_sha256(p)
    return out


def manifest_fingerprint(manifest: dict) -> dict:
    """Everything that must match between identical runs."""
    return {k: v for k, v in manifest.items()
            if k not in ("timing", "created_at", "output_dir")}


def run_pipeline(cfg: ExperimentConfig,
                 out_dir: Optional[str] = None,
                 progress: Optional[Callable[[str], None]] = None) -> dict:
    out_dir = out_dir or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "version": __version__,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "ablate": cfg.ablate,
        "status": "running",
        "stages": [],
        "timing": {},
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "output_dir": os.path.abspath(out_dir),
    }
    with RunLock(os.path.join(out_dir, LOCK_NAME)):
        for name, fn in stage_list(cfg):
            if progress:
                progress(name)
            started = time.time()
            try:
                info = fn(cfg, out_dir)
            except Exception as exc:
                manifest["status"] = "failed"
                manifest["failed_stage"] = name
                manifest["error"] = f"{type(exc).__name__}: {exc}"
                report.write_json(_path(out_dir, "manifest"), manifest)
                raise
            manifest["stages"].append({"name": name, "info": info})
            manifest["timing"][name] = round(time.time() - started, 3)
            if name == "evaluate":
                manifest["metrics"] = info
        manifest["status"] = "complete"
        manifest["checksums"] = _checksums(out_dir)
        report.write_json(_path(out_dir, "manifest"), manifest)
    return manifest
