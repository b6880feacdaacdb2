"""Figures written next to the textual reports."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams.update({
    "font.size": 10,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def figsize(scale: float = 1.0, ratio: float | None = None):
    width = 6.0 * scale
    ratio = ratio or (math.sqrt(5.0) - 1.0) / 2.0
    return width, width * ratio


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", dpi=150)
    plt.close(fig)
    return path


def plot_training_curve(records, path, valid_mrr=None):
    """Mean loss (left axis) and learning rate (right axis) per epoch.

    ``records`` are epoch dicts or :class:`~gcpkge.trainer.EpochRecord`s;
    ``valid_mrr`` optionally maps epoch -> validation MRR.
    """
    rows = [r if isinstance(r, dict) else r.as_dict() for r in records]
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=figsize())
    ax.plot(epochs, [r["mean_loss"] for r in rows], "o-", ms=3, color="C0", label="mean loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss per entry")
    ax2 = ax.twinx()
    ax2.step(epochs, [r["lr"] for r in rows], where="post", color="C1", label="learning rate")
    ax2.set_ylabel("learning rate")
    handles = ax.get_lines() + ax2.get_lines()
    if valid_mrr:
        ax3 = ax.twinx()
        ax3.spines["right"].set_position(("axes", 1.15))
        ks = sorted(valid_mrr)
        ax3.plot(ks, [valid_mrr[k] for k in ks], "s--", ms=3, color="C2", label="valid MRR")
        ax3.set_ylabel("valid MRR")
        handles += ax3.get_lines()
    ax.legend(handles, [h.get_label() for h in handles], loc="upper right")
    return save(fig, path)


def plot_eval_report(report, path):
    """Grouped bars of MRR and Hits@k, overall and per direction."""
    groups = {"all": report}
    groups.update(report.per_direction)
    metrics = ["mrr", "hits1", "hits3", "hits10"]
    fig, ax = plt.subplots(figsize=figsize())
    width = 0.8 / len(groups)
    for i, (name, m) in enumerate(groups.items()):
        xs = [j + i * width for j in range(len(metrics))]
        ax.bar(xs, [getattr(m, k) for k in metrics], width, label=name)
    ax.set_xticks([j + width * (len(groups) - 1) / 2 for j in range(len(metrics))])
    ax.set_xticklabels(["MRR", "Hits@1", "Hits@3", "Hits@10"])
    ax.set_ylim(0, 1)
    ax.set_title(f"{report.setting}, {report.n_queries} queries")
    ax.legend()
    return save(fig, path)


def plot_rank_sweep(rows, path):
    """MRR and Hits@1 against embedding rank (log-scaled x)."""
    rows = sorted(rows, key=lambda r: r["rank"])
    ranks = [r["rank"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=figsize(1.4, 0.4))
    for ax, key, label in zip(axes, ("mrr", "hits1"), ("MRR", "Hits@1")):
        ax.plot(ranks, [r[key] for r in rows], "o-")
        ax.set_xscale("log")
        ax.set_xticks(ranks)
        ax.set_xticklabels([str(x) for x in ranks])
        ax.set_xlabel("rank")
        ax.set_ylabel(label)
    fig.tight_layout()
    return save(fig, path)
