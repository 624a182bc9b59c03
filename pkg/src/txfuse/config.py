"""Experiment configuration: INI file, environment, and CLI overrides.

Precedence, lowest to highest: built-in defaults, config file, the
TXFUSE_SEED environment variable (seed only), explicit CLI flags. The
configuration hash covers every value that influences computed numbers,
so two runs with equal hashes and seeds must produce identical metrics.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from typing import Optional

from .cafn import CafnConfig
from .magae import MagaeConfig
from .synth import SyntheticSpec
from .txclm import TxCLMConfig

ENV_SEED = "TXFUSE_SEED"

DEFAULTS = {
    "experiment": {
        "seed": "7",
        "output_dir": "runs/out",
        "ablate": "none",
        "transactions": "",     # empty: generate synthetically
        "labels": "",
    },
    "synthetic": {
        "n_accounts": "2000",
        "fraud_fraction": "0.10",
        "horizon_days": "120",
        "mule_fraction": "0.4",
        "night_owl_fraction": "0.08",
        "busy_trader_fraction": "0.08",
        "subscriber_fraction": "0.08",
    },
    "split": {
        "method": "random",     # random | components
        "ratios": "0.7 0.1 0.2",
        "downsample_benign": "",   # e.g. 2.0 for the 2:1 protocol
    },
    "txclm": {
        "d_lm": "64",
        "layers": "2",
        "heads": "4",
        "max_seq_len": "128",
        "mask_ratio": "0.15",
        "tau": "0.1",
        "contrastive_weight": "1.0",
        "epochs": "8",
        "batch_size": "16",
        "lr": "1e-3",
        "min_freq": "1",
    },
    "features": {
        "long_window_days": "30",
        "short_window_hours": "24",
    },
    "magae": {
        "d_h": "64",
        "mask_ratio": "0.6",
        "gamma": "2.0",
        "fanout": "10",
        "n_batches": "",
        "epochs": "30",
        "lr": "5e-3",
    },
    "cafn": {
        "d_f": "64",
        "k_s": "8",
        "k_f": "4",
        "epochs": "60",
        "batch_size": "32",
        "lr": "1e-3",
        "patience": "10",
    },
    "sampler": {
        "fanouts": "10 10",
        "n_batches": "8",
        "trials": "10",
    },
}

ABLATIONS = ("none", "add", "linear", "no-graph", "no-lm", "no-cl",
             "no-features")


class ExperimentConfig:
    """Typed view over merged section/key string values."""

    def __init__(self, values: dict):
        self.values = values

    # -- generic accessors ------------------------------------------------
    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    def getint(self, section: str, key: str) -> int:
        return int(self.get(section, key))

    def getfloat(self, section: str, key: str) -> float:
        return float(self.get(section, key))

    # -- experiment-level -------------------------------------------------
    @property
    def seed(self) -> int:
        return self.getint("experiment", "seed")

    @property
    def output_dir(self) -> str:
        return self.get("experiment", "output_dir")

    @property
    def ablate(self) -> str:
        mode = self.get("experiment", "ablate")
        if mode not in ABLATIONS:
            raise ValueError(f"unknown ablation {mode!r}; "
                             f"choose from {ABLATIONS}")
        return mode

    @property
    def transactions_path(self) -> str:
        return self.get("experiment", "transactions")

    @property
    def labels_path(self) -> str:
        return self.get("experiment", "labels")

    @property
    def synthetic(self) -> bool:
        has_tx = bool(self.transactions_path)
        has_labels = bool(self.labels_path)
        if has_tx != has_labels:
            raise ValueError("transactions and labels paths must be "
                             "provided together")
        return not has_tx

    # -- module configs ---------------------------------------------------
    def synthetic_spec(self) -> SyntheticSpec:
        s = self.values["synthetic"]
        return SyntheticSpec(
            n_accounts=int(s["n_accounts"]),
            fraud_fraction=float(s["fraud_fraction"]),
            horizon_days=float(s["horizon_days"]),
            mule_fraction=float(s["mule_fraction"]),
            night_owl_fraction=float(s["night_owl_fraction"]),
            busy_trader_fraction=float(s["busy_trader_fraction"]),
            subscriber_fraction=float(s["subscriber_fraction"]),
        )

    def split_ratios(self) -> tuple:
        parts = self.get("split", "ratios").split()
        if len(parts) != 3:
            raise ValueError("split ratios must be three numbers")
        return tuple(float(p) for p in parts)

    def txclm_config(self, vocab_size: int,
                     contrastive_weight: Optional[float] = None) -> TxCLMConfig:
        t = self.values["txclm"]
        weight = float(t["contrastive_weight"]) \
            if contrastive_weight is None else contrastive_weight
        return TxCLMConfig(
            vocab_size=vocab_size,
            d_lm=int(t["d_lm"]),
            layers=int(t["layers"]),
            heads=int(t["heads"]),
            max_seq_len=int(t["max_seq_len"]),
            mask_ratio=float(t["mask_ratio"]),
            tau=float(t["tau"]),
            contrastive_weight=weight,
            epochs=int(t["epochs"]),
            batch_size=int(t["batch_size"]),
            lr=float(t["lr"]),
            seed=self.seed,
        )

    def magae_config(self) -> MagaeConfig:
        m = self.values["magae"]
        return MagaeConfig(
            d_h=int(m["d_h"]),
            mask_ratio=float(m["mask_ratio"]),
            gamma=float(m["gamma"]),
            fanout=int(m["fanout"]),
            n_batches=int(m["n_batches"]) if m["n_batches"] else None,
            epochs=int(m["epochs"]),
            lr=float(m["lr"]),
            seed=self.seed,
        )

    def cafn_config(self, d_s: int, d_h: int, ablate: str) -> CafnConfig:
        c = self.values["cafn"]
        return CafnConfig(
            d_s=d_s,
            d_h=d_h,
            d_f=int(c["d_f"]),
            k_s=int(c["k_s"]),
            k_f=int(c["k_f"]),
            lr=float(c["lr"]),
            batch_size=int(c["batch_size"]),
            epochs=int(c["epochs"]),
            patience=int(c["patience"]),
            seed=self.seed,
            ablate=ablate,
        )

    def feature_windows(self) -> tuple:
        f = self.values["features"]
        return (int(float(f["long_window_days"]) * 86400),
                int(float(f["short_window_hours"]) * 3600))

    # -- serialization ----------------------------------------------------
    def canonical(self, include_output_dir: bool = False) -> str:
        lines = []
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                if not include_output_dir and (section, key) == \
                        ("experiment", "output_dir"):
                    continue
                lines.append(f"{section}.{key}={self.values[section][key]}")
        return "\n".join(lines)

    def digest(self) -> str:
        """Hash of everything that influences reported numbers."""
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def write(self, path: str) -> None:
        parser = configparser.ConfigParser()
        for section, kv in self.values.items():
            parser[section] = dict(kv)
        with open(path, "w", encoding="utf-8") as fh:
            parser.write(fh)


def load_config(path: Optional[str] = None,
                overrides: Optional[dict] = None,
                env: Optional[dict] = None) -> ExperimentConfig:
    """Merge defaults <- file <- TXFUSE_SEED <- explicit overrides.

    `overrides` maps (section, key) to string values, typically from CLI
    flags the user actually passed.
    """
    values = {s: dict(kv) for s, kv in DEFAULTS.items()}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise FileNotFoundError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in values:
                raise ValueError(f"unknown config section [{section}]")
            for key, val in parser[section].items():
                if key not in values[section]:
                    raise ValueError(f"unknown key {key!r} in [{section}]")
                values[section][key] = val
    env = os.environ if env is None else env
    if ENV_SEED in env:
        values["experiment"]["seed"] = str(int(env[ENV_SEED]))
    for (section, key), val in (overrides or {}).items():
        if section not in values or key not in values[section]:
            raise ValueError(f"unknown override {section}.{key}")
        values[section][key] = str(val)
    return ExperimentConfig(values)
