"""Evaluation reports: JSON, delimited tables, and rendered figures.

Figures are written straight to files with the Agg backend so runs work
on headless machines: training loss curves, the test confusion matrix, a
token self-similarity heatmap, and sampler benchmark bars.
"""

from __future__ import annotations

import json
import os
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .cafn import MetricReport, write_metrics_csv  # noqa: E402


def write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def metrics_payload(reports: dict) -> dict:
    return {split: r.as_dict() for split, r in reports.items()}


def write_reports(out_dir: str, reports: dict) -> tuple:
    """metrics.json plus metrics.csv with Precision, Recall, F1, BAcc."""
    json_path = os.path.join(out_dir, "metrics.json")
    csv_path = os.path.join(out_dir, "metrics.csv")
    write_json(json_path, metrics_payload(reports))
    write_metrics_csv(csv_path, reports)
    return json_path, csv_path


def fig_loss_curves(path: str, lm_logs: Optional[Sequence] = None,
                    gae_logs: Optional[Sequence] = None,
                    cafn_history: Optional[Sequence] = None) -> None:
    panels = [(name, logs) for name, logs in
              (("language model", lm_logs), ("graph autoencoder", gae_logs),
               ("fusion classifier", cafn_history)) if logs]
    if not panels:
        raise ValueError("no training logs to plot")
    fig, axes = plt.subplots(1, len(panels), figsize=(4.2 * len(panels), 3.2))
    if len(panels) == 1:
        axes = [axes]
    for ax, (name, logs) in zip(axes, panels):
        if name == "language model":
            ax.plot([l.epoch for l in logs], [l.mlm for l in logs],
                    label="masked-token")
            if any(l.contrastive for l in logs):
                ax.plot([l.epoch for l in logs],
                        [l.contrastive for l in logs], label="contrastive")
            ax.legend(fontsize=8)
        elif name == "graph autoencoder":
            ax.plot([l.epoch for l in logs], [l.sce for l in logs])
        else:
            ax.plot([l.epoch for l in logs], [l.train_loss for l in logs],
                    label="train loss")
            ax2 = ax.twinx()
            ax2.plot([l.epoch for l in logs], [l.val_f1 for l in logs],
                     color="tab:orange", label="val F1")
            ax2.set_ylabel("val F1", fontsize=8)
        ax.set_title(name, fontsize=10)
        ax.set_xlabel("epoch", fontsize=8)
        ax.set_ylabel("loss", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def fig_confusion(path: str, report: MetricReport, title: str = "test") -> None:
    m = np.array([[report.tn, report.fp], [report.fn, report.tp]],
                 dtype=float)
    fig, ax = plt.subplots(figsize=(3.4, 3.0))
    ax.imshow(m, cmap="Blues")
    for i in range(2):
        for j in range(2):
            ax.text(j, i, f"{int(m[i, j])}", ha="center", va="center",
                    color="black")
    ax.set_xticks([0, 1], ["pred normal", "pred fraud"], fontsize=8)
    ax.set_yticks([0, 1], ["true normal", "true fraud"], fontsize=8)
    ax.set_title(f"confusion ({title})", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def fig_self_similarity(path: str, matrix: np.ndarray,
                        labels: Sequence[str] = ("with contrastive",
                                                 "masked-token only")) -> None:
    """Heatmap of per-sentence self-similarity, one column per model."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    fig, ax = plt.subplots(figsize=(3.6, 4.0))
    im = ax.imshow(matrix.T, aspect="auto", cmap="magma",
                   vmin=0.0, vmax=1.0)
    ax.set_yticks(range(matrix.shape[0]), labels[:matrix.shape[0]],
                  fontsize=8)
    ax.set_xlabel("held-out sentence", fontsize=8)
    ax.set_title("token self-similarity", fontsize=10)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def fig_sampler_stats(path: str, stats: Sequence) -> None:
    """Per-layer unique-vertex bars for each benchmarked sampler."""
    if not stats:
        raise ValueError("no sampler statistics to plot")
    n_layers = len(stats[0].mean_vertices)
    x = np.arange(n_layers)
    width = 0.8 / len(stats)
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    for i, s in enumerate(stats):
        ax.bar(x + i * width, s.mean_vertices, width,
               label=f"{s.sampler} ({s.iterations_per_second:.1f} it/s)")
    ax.set_xticks(x + width * (len(stats) - 1) / 2,
                  [f"layer {i + 1}" for i in range(n_layers)], fontsize=8)
    ax.set_ylabel("mean unique vertices", fontsize=8)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_figures(out_dir: str, lm_logs=None, gae_logs=None,
                   cafn_history=None, test_report: Optional[MetricReport] = None,
                   self_sim: Optional[np.ndarray] = None,
                   sampler_stats: Optional[Sequence] = None) -> list:
    fig_dir = os.path.join(out_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    written = []
    if lm_logs or gae_logs or cafn_history:
        p = os.path.join(fig_dir, "loss_curves.png")
        fig_loss_curves(p, lm_logs, gae_logs, cafn_history)
        written.append(p)
    if test_report is not None:
        p = os.path.join(fig_dir, "confusion_matrix.png")
        fig_confusion(p, test_report)
        written.append(p)
    if self_sim is not None:
        p = os.path.join(fig_dir, "self_similarity.png")
        fig_self_similarity(p, self_sim)
        written.append(p)
    if sampler_stats:
        p = os.path.join(fig_dir, "sampler_stats.png")
        fig_sampler_stats(p, sampler_stats)
        written.append(p)
    return written
