"""Figures written next to the delimited outputs of each command."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC_PARAMS = {
    "axes.spines.right": False,
    "axes.spines.top": False,
    "figure.figsize": (6, 3.5),
    "figure.dpi": 100,
    "font.size": 9,
    "svg.hashsalt": "musictext",
}


def savefig(fig, path, dpi=150):
    # no timestamp or version metadata, so reruns give identical files
    fig.savefig(path, dpi=dpi, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def plot_history(history, path):
    with plt.rc_context(RC_PARAMS):
        fig, ax = plt.subplots()
        epochs = [r.epoch for r in history.epochs]
        ax.plot(epochs, [r.loss for r in history.epochs], color="C0", label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("NT-Xent loss")
        ax2 = ax.twinx()
        ax2.plot(epochs, [r.score for r in history.epochs], color="C1", label="validation mAP@10")
        ax2.set_ylabel("validation mAP@10")
        ax2.set_ylim(0, 1)
        if history.best_epoch:
            ax.axvline(history.best_epoch, color="0.6", ls="--", lw=0.8)
        for e in history.decay_epochs:
            ax.axvline(e, color="C2", ls=":", lw=0.8)
        fig.legend(loc="upper right", frameon=False)
        savefig(fig, path)


def plot_metrics(metrics: dict, path, title="retrieval"):
    with plt.rc_context(RC_PARAMS):
        fig, ax = plt.subplots()
        names = list(metrics)
        ax.bar(names, [100 * metrics[n] for n in names], color="C0")
        ax.set_ylabel("%")
        ax.set_ylim(0, 100)
        ax.set_title(title)
        for i, n in enumerate(names):
            ax.text(i, 100 * metrics[n] + 1, f"{100 * metrics[n]:.1f}", ha="center", fontsize=8)
        savefig(fig, path)


def plot_score_histogram(report, path):
    with plt.rc_context(RC_PARAMS):
        fig, ax = plt.subplots()
        kept = [s.score for s in report.kept]
        removed = [s.score for s in report.removed]
        bins = np.linspace(-1, 1, 41)
        ax.hist([kept, removed], bins=bins, stacked=True, color=["C0", "C3"], label=["kept", "removed"])
        ax.axvline(report.threshold, color="k", lw=0.8)
        ax.set_xlabel("relevance score")
        ax.set_ylabel("texts")
        ax.legend(frameon=False)
        savefig(fig, path)


def plot_top_aspects(stats, path):
    with plt.rc_context(RC_PARAMS):
        fig, ax = plt.subplots()
        top = stats.top_aspects[::-1]
        ax.barh([a for a, _ in top], [n for _, n in top], color="C0")
        ax.set_xlabel("tracks")
        ax.set_title("most common aspects")
        savefig(fig, path)
