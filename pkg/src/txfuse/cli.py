"""Command-line front end.

Each subcommand maps flags onto config overrides and invokes either a
single pipeline stage or the whole run. Precedence, lowest to highest:
built-in defaults, --config file, TXFUSE_SEED, explicit flags.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Optional

from . import __version__, pipeline
from .config import ABLATIONS, ExperimentConfig, load_config


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--out", help="output directory for run artifacts")
    p.add_argument("--seed", type=int, help="master random seed")


def _flag(p: argparse.ArgumentParser, name: str, section: str, key: str,
          kind=str, help: str = "") -> None:
    p.add_argument(name, type=kind, help=help,
                   dest=f"ov__{section}__{key}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="txfuse",
        description="Fraud detection over transaction language and "
                    "account-graph views.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    _flag(p, "--accounts", "synthetic", "n_accounts", int)
    _flag(p, "--fraud-fraction", "synthetic", "fraud_fraction", float)
    _flag(p, "--horizon-days", "synthetic", "horizon_days", int)

    p = sub.add_parser("ingest", help="load transfers and write the split")
    _add_common(p)
    _flag(p, "--transactions", "experiment", "transactions")
    _flag(p, "--labels", "experiment", "labels")
    _flag(p, "--split-method", "split", "method")
    _flag(p, "--ratios", "split", "ratios",
          help="three space-separated fractions, e.g. '0.7 0.1 0.2'")

    p = sub.add_parser("features", help="expert node features")
    _add_common(p)
    _flag(p, "--long-window-days", "features", "long_window_days", float)
    _flag(p, "--short-window-hours", "features", "short_window_hours", float)

    p = sub.add_parser("pretrain-lm", help="masked language pretraining")
    _add_common(p)
    _flag(p, "--d-lm", "txclm", "d_lm", int)
    _flag(p, "--layers", "txclm", "layers", int)
    _flag(p, "--heads", "txclm", "heads", int)
    _flag(p, "--epochs", "txclm", "epochs", int)
    _flag(p, "--lr", "txclm", "lr", float)
    _flag(p, "--batch-size", "txclm", "batch_size", int)
    _flag(p, "--mask-ratio", "txclm", "mask_ratio", float)
    _flag(p, "--contrastive-weight", "txclm", "contrastive_weight", float)
    _flag(p, "--tau", "txclm", "tau", float)

    p = sub.add_parser("pretrain-gae", help="masked graph autoencoder")
    _add_common(p)
    _flag(p, "--d-h", "magae", "d_h", int)
    _flag(p, "--mask-ratio", "magae", "mask_ratio", float)
    _flag(p, "--gamma", "magae", "gamma", float)
    _flag(p, "--fanout", "magae", "fanout", int)
    _flag(p, "--epochs", "magae", "epochs", int)
    _flag(p, "--lr", "magae", "lr", float)

    p = sub.add_parser("fuse-train", help="train the fusion classifier")
    _add_common(p)
    _flag(p, "--ks", "cafn", "k_s", int)
    _flag(p, "--kf", "cafn", "k_f", int)
    _flag(p, "--df", "cafn", "d_f", int)
    _flag(p, "--epochs", "cafn", "epochs", int)
    _flag(p, "--lr", "cafn", "lr", float)
    _flag(p, "--patience", "cafn", "patience", int)
    p.add_argument("--ablate", choices=ABLATIONS)

    p = sub.add_parser("evaluate", help="score splits, write reports/figures")
    _add_common(p)

    p = sub.add_parser("sample-bench", help="neighbor-sampler statistics")
    _add_common(p)
    _flag(p, "--fanouts", "sampler", "fanouts",
          help="space-separated per-layer fanouts, e.g. '10 10'")
    _flag(p, "--trials", "sampler", "trials", int)
    _flag(p, "--n-batches", "sampler", "n_batches", int)

    p = sub.add_parser("run", help="full pipeline, all stages in order")
    _add_common(p)
    p.add_argument("--ablate", choices=ABLATIONS)
    _flag(p, "--transactions", "experiment", "transactions")
    _flag(p, "--labels", "experiment", "labels")
    return parser


def _cmd_pretrain_lm(cfg: ExperimentConfig, out_dir: str) -> dict:
    # serialization is part of this step from the CLI's point of view
    info = pipeline.stage_corpus(cfg, out_dir)
    info.update(pipeline.stage_pretrain_lm(cfg, out_dir))
    return info


STAGE_COMMANDS = {
    "synth": pipeline.stage_synth,
    "ingest": pipeline.stage_ingest,
    "features": pipeline.stage_features,
    "pretrain-lm": _cmd_pretrain_lm,
    "pretrain-gae": pipeline.stage_pretrain_gae,
    "fuse-train": pipeline.stage_fuse_train,
    "evaluate": pipeline.stage_evaluate,
}


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {}
    for attr, value in vars(args).items():
        if attr.startswith("ov__") and value is not None:
            _, section, key = attr.split("__", 2)
            overrides[(section, key)] = str(value)
    if args.out is not None:
        overrides[("experiment", "output_dir")] = args.out
    if args.seed is not None:
        overrides[("experiment", "seed")] = str(args.seed)
    if getattr(args, "ablate", None) is not None:
        overrides[("experiment", "ablate")] = args.ablate
    return load_config(args.config, overrides)


def _run_sample_bench(cfg: ExperimentConfig, out_dir: str) -> dict:
    from .labor import sampling_stats

    groups, _ = pipeline._load_world(cfg, out_dir)
    graph = pipeline._full_graph(groups)
    fanouts = tuple(int(x) for x in cfg.get("sampler", "fanouts").split())
    results = {}
    for sampler in ("labor", "ns"):
        s = sampling_stats(graph, sampler, fanouts,
                           n_batches=cfg.getint("sampler", "n_batches"),
                           trials=cfg.getint("sampler", "trials"),
                           seed=cfg.seed)
        results[sampler] = {
            "mean_vertices": [round(float(v), 2) for v in s.mean_vertices],
            "mean_edges": [round(float(e), 2) for e in s.mean_edges],
            "iterations_per_second": round(s.iterations_per_second, 2),
        }
    return results


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = _config_from_args(args)
    out_dir = cfg.output_dir

    if args.command == "run":
        names = [n for n, _ in pipeline.stage_list(cfg)]
        print(f"run: seed={cfg.seed} ablate={cfg.ablate} "
              f"stages={','.join(names)}")
        manifest = pipeline.run_pipeline(
            cfg, progress=lambda name: print(f"stage {name} ..."))
        for split, vals in manifest["metrics"].items():
            line = " ".join(f"{k}={v:.4f}" for k, v in vals.items()
                            if isinstance(v, float))
            print(f"{split}: {line}")
        print(f"manifest: {pipeline._path(out_dir, 'manifest')}")
        return 0

    os.makedirs(out_dir, exist_ok=True)
    if args.command == "sample-bench":
        info = _run_sample_bench(cfg, out_dir)
        for sampler, vals in info.items():
            print(f"{sampler}: vertices={vals['mean_vertices']} "
                  f"edges={vals['mean_edges']} "
                  f"{vals['iterations_per_second']} it/s")
        return 0

    info = STAGE_COMMANDS[args.command](cfg, out_dir)
    for key, value in info.items():
        print(f"{key}: {value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
