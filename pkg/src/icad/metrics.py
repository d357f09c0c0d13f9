"""Pixel-level ROC and precision-recall curves."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np


class UndefinedMetricError(ValueError):
    pass


@dataclass
class EvalCurve:
    kind: str  # "ROC" or "PR"
    thresholds: np.ndarray
    x: np.ndarray  # FPR or recall
    y: np.ndarray  # TPR or precision
    auc: float

    def __len__(self) -> int:
        return len(self.x)

    def rows(self):
        return zip(self.thresholds.tolist(), self.x.tolist(), self.y.tolist())


def _ranked_counts(scores, labels) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int, int]:
    """Cumulative TP/FP counts at each distinct score, highest first."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of every block of equal scores, so ties flip together
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return s[last], tp, fp, int(y.sum()), int((~y).sum())


def roc_curve(scores, labels) -> EvalCurve:
    thr, tp, fp, pos, neg = _ranked_counts(scores, labels)
    if pos == 0 or neg == 0:
        raise UndefinedMetricError(f"ROC needs both classes (positives={pos}, negatives={neg})")
    fpr = np.r_[0.0, fp / neg]
    tpr = np.r_[0.0, tp / pos]
    return EvalCurve("ROC", np.r_[np.inf, thr], fpr, tpr, float(np.trapezoid(tpr, fpr)))


def pr_curve(scores, labels) -> EvalCurve:
    """Precision/recall per threshold; AUPRC by right-continuous steps (average precision)."""
    thr, tp, fp, pos, _ = _ranked_counts(scores, labels)
    if pos == 0:
        raise UndefinedMetricError("precision-recall needs at least one positive label")
    recall = np.r_[0.0, tp / pos]
    precision = np.r_[1.0, tp / (tp + fp)]
    return EvalCurve("PR", np.r_[np.inf, thr], recall, precision, step_area(recall, precision))


def step_area(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(np.diff(x) * y[1:]))


def collect_pixels(maps: Iterable[np.ndarray], label_maps: Iterable[np.ndarray]):
    """Flatten scored pixels of several images; NaN scores are excluded.

    Returns (scores, labels, excluded_pixels, excluded_positives).
    """
    s_all, l_all = [], []
    excluded = excluded_pos = 0
    for scores, labels in zip(maps, label_maps):
        scores = np.asarray(scores)
        labels = np.asarray(labels).astype(bool)
        valid = ~np.isnan(scores)
        excluded += int((~valid).sum())
        excluded_pos += int((labels & ~valid).sum())
        s_all.append(scores[valid].astype(np.float64))
        l_all.append(labels[valid])
    if not s_all:
        return np.zeros(0), np.zeros(0, dtype=bool), excluded, excluded_pos
    return np.concatenate(s_all), np.concatenate(l_all), excluded, excluded_pos


def summarize(scores, labels, excluded_pixels: int = 0) -> dict:
    labels = np.asarray(labels).astype(bool)
    roc, pr = roc_curve(scores, labels), pr_curve(scores, labels)
    return {
        "auroc": roc.auc,
        "auprc": pr.auc,
        "positives": int(labels.sum()),
        "negatives": int((~labels).sum()),
        "excluded_pixels": int(excluded_pixels),
    }


def write_curve_csv(path, curve: EvalCurve) -> None:
    names = ("fpr", "tpr") if curve.kind == "ROC" else ("recall", "precision")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", *names])
        for t, x, y in curve.rows():
            w.writerow([repr(t), repr(x), repr(y)])


def write_summary(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
