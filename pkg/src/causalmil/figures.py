"""Report figures rendered straight to image files.

Every function takes already-computed results (training log, eval
report, ablation rows), draws one figure with the Agg backend, writes
it to the given path, and returns that path. Nothing here computes
metrics; empty inputs are rejected rather than drawn as blank axes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .bagio import ATTRIBUTES
from .errors import DomainError
from .evalmetrics import EvalReport
from .trainer import TrainLogRecord

__all__ = [
    "plot_training_curves",
    "plot_group_accuracy",
    "plot_attribution",
    "plot_ablation",
]

_LOSS_SERIES = (
    ("loss_total", "total"),
    ("loss_cls", "classification"),
    ("loss_causal", "consistency"),
    ("loss_demo", "reconstruction"),
    ("loss_fair", "fairness"),
)

_METRIC_SERIES = (
    ("val_auc", "val AUC"),
    ("val_acc", "val accuracy"),
    ("val_c_index", "val C-index"),
)


def _prepare(path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def plot_training_curves(log: Sequence[TrainLogRecord], path: str | Path) -> Path:
    """Loss components on the left, validation metrics plus lr on the right."""
    if not log:
        raise DomainError("empty training log")
    path = _prepare(path)
    epochs = [r.epoch for r in log]
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(10, 4))
    for attr, label in _LOSS_SERIES:
        values = [getattr(r, attr) for r in log]
        if any(v is not None for v in values):
            ax_loss.plot(epochs, [np.nan if v is None else v for v in values], label=label)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=8)
    ax_loss.set_title("training loss")
    for attr, label in _METRIC_SERIES:
        values = [getattr(r, attr) for r in log]
        if any(v is not None for v in values):
            ax_val.plot(epochs, [np.nan if v is None else v for v in values], label=label)
    ax_lr = ax_val.twinx()
    ax_lr.plot(epochs, [r.lr for r in log], linestyle="--", color="gray", label="lr")
    ax_lr.set_ylabel("learning rate", color="gray")
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("metric")
    ax_val.legend(fontsize=8, loc="lower right")
    ax_val.set_title("validation")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_group_accuracy(report: EvalReport, path: str | Path) -> Path:
    """One panel per demographic attribute: accuracy bars per group with
    the disparity value in the panel title."""
    populated = [a for a in ATTRIBUTES if report.group_accuracy.get(a)]
    if not populated:
        raise DomainError("report holds no per-group accuracies")
    path = _prepare(path)
    fig, axes = plt.subplots(1, len(populated), figsize=(3.5 * len(populated), 3.5))
    if len(populated) == 1:
        axes = [axes]
    for ax, attribute in zip(axes, populated):
        table = report.group_accuracy[attribute]
        groups = list(table)
        ax.bar(range(len(groups)), [table[g] for g in groups], color="#4878a8")
        ax.set_xticks(range(len(groups)))
        ax.set_xticklabels(groups, rotation=30, ha="right", fontsize=8)
        ax.set_ylim(0.0, 1.05)
        ax.set_ylabel("accuracy")
        disparity = report.gdv.get(attribute)
        suffix = "n/a" if disparity is None else f"{disparity:.4f}"
        ax.set_title(f"{attribute} (disparity {suffix})", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_attribution(report: EvalReport, path: str | Path) -> Path:
    """Mean representation shift per intervened attribute plus the
    all-demographics total."""
    if report.attribution_factors is None or report.attribution_mean is None:
        raise DomainError("report holds no attribution results")
    path = _prepare(path)
    labels = list(ATTRIBUTES) + ["all"]
    values = [report.attribution_factors[a] for a in ATTRIBUTES] + [report.attribution_mean]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(range(len(labels)), values, color=["#4878a8"] * 3 + ["#a85448"])
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels)
    ax.set_ylabel("mean representation shift")
    ax.set_title("demographic intervention attribution", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_ablation(rows: Sequence[Mapping], path: str | Path) -> Path:
    """Grouped comparison of graph variants: mean accuracy and mean gender
    disparity over seeds, with population-std error bars."""
    if not rows:
        raise DomainError("no ablation rows")
    variants: list[str] = []
    for row in rows:
        if row["variant"] not in variants:
            variants.append(row["variant"])
    path = _prepare(path)
    fig, (ax_acc, ax_gdv) = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, key, title in ((ax_acc, "acc", "test accuracy"), (ax_gdv, "gdv", "gender disparity")):
        means, stds = [], []
        for v in variants:
            vals = [row[key] for row in rows if row["variant"] == v and row[key] is not None]
            if not vals:
                raise DomainError(f"variant {v!r} has no {key!r} values")
            means.append(float(np.mean(vals)))
            stds.append(float(np.std(vals)))
        ax.bar(range(len(variants)), means, yerr=stds, capsize=4, color="#4878a8")
        ax.set_xticks(range(len(variants)))
        ax.set_xticklabels(variants)
        ax.set_title(title, fontsize=10)
    ax_acc.set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
