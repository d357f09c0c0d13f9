"""Figures written next to the numeric evaluation outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import EvalCurve  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
    "svg.hashsalt": "icad",
}

FORMATS = ("png", "svg")


def _save(fig, stem, formats=FORMATS):
    stem = Path(stem)
    paths = []
    for ext in formats:
        p = stem.with_suffix(f".{ext}")
        kw = {"metadata": {"Date": None}} if ext == "svg" else {"metadata": {"Software": None}}
        fig.savefig(p, **kw)
        paths.append(p)
    plt.close(fig)
    return paths


def plot_curves(curves: Dict[str, Dict[str, EvalCurve]], stem, formats=FORMATS):
    """Side-by-side PR and ROC panels; ``curves`` maps method name to {"ROC": .., "PR": ..}."""
    with plt.rc_context(STYLE):
        fig, (ax_pr, ax_roc) = plt.subplots(1, 2, figsize=(7.0, 3.2))
        for name, c in curves.items():
            pr, roc = c["PR"], c["ROC"]
            ax_pr.step(pr.x, pr.y, where="pre", label=f"{name} (AUPRC {pr.auc:.3f})")
            ax_roc.plot(roc.x, roc.y, label=f"{name} (AUROC {roc.auc:.3f})")
        ax_pr.set(xlabel="recall", ylabel="precision", xlim=(0, 1), ylim=(0, 1.02), title="precision-recall")
        ax_roc.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
        ax_roc.set(xlabel="false positive rate", ylabel="true positive rate", xlim=(0, 1), ylim=(0, 1.02), title="ROC")
        for ax in (ax_pr, ax_roc):
            ax.legend(loc="lower left" if ax is ax_pr else "lower right", frameon=False)
        return _save(fig, stem, formats)


def plot_anomaly_panel(
    image: np.ndarray,
    scores: np.ndarray,
    labels: Optional[np.ndarray],
    stem,
    title: str = "",
    formats: Sequence[str] = ("png",),
):
    """Query image, anomaly map and (when known) the defect outline."""
    n = 3 if labels is not None else 2
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.8))
        axes[0].imshow(image, cmap="gray", vmin=-1, vmax=1)
        axes[0].set_title("query")
        shown = np.ma.masked_invalid(scores)
        im = axes[1].imshow(shown, cmap="inferno")
        axes[1].set_title("anomaly score")
        fig.colorbar(im, ax=axes[1], fraction=0.046, pad=0.04)
        if labels is not None:
            axes[2].imshow(image, cmap="gray", vmin=-1, vmax=1)
            if labels.any():
                axes[2].contour(labels, levels=[0.5], colors="tab:red", linewidths=0.8)
            axes[2].set_title("ground truth")
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        if title:
            fig.suptitle(title)
        return _save(fig, stem, formats)


def plot_loss_log(rows: Sequence[dict], stem, formats=("png",)):
    steps = [r["batch"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.plot(steps, [r["train_loss"] for r in rows], lw=0.8, label="train")
        val = [(r["batch"], r["val_loss"]) for r in rows if r.get("val_loss") is not None]
        if val:
            ax.plot(*zip(*val), "o-", ms=3, label="validation")
        ax.set(xlabel="batch", ylabel="loss", yscale="log")
        ax.legend(frameon=False)
        return _save(fig, stem, formats)
