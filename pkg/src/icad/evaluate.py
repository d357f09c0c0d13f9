"""Whole-image evaluation: scan, pixel metrics, exported maps and figures."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import SurfaceImage
from .metrics import EvalCurve, collect_pixels, pr_curve, roc_curve, summarize, write_curve_csv, write_summary
from .scoring import STRIDE, AnomalyMap, scan_image, write_amap, write_amap_png

log = logging.getLogger(__name__)


@dataclass
class Evaluation:
    summary: dict
    roc: EvalCurve
    pr: EvalCurve
    maps: List[AnomalyMap] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)


def evaluate_model(
    model,
    images: Sequence[SurfaceImage],
    stride: int = STRIDE,
    batch_size: int = 8,
    out_dir=None,
    figures: bool = True,
    name: str = "model",
) -> Evaluation:
    """Pixel-level AUROC/AUPRC over all scored pixels of labelled images."""
    maps = [scan_image(model, im, stride=stride, batch_size=batch_size) for im in images]
    return evaluate_maps(maps, images, out_dir=out_dir, figures=figures, name=name)


def evaluate_maps(
    maps: Sequence[AnomalyMap],
    images: Sequence[SurfaceImage],
    out_dir=None,
    figures: bool = True,
    name: str = "model",
) -> Evaluation:
    warnings = []
    s, y, excluded, excluded_pos = collect_pixels([m.scores for m in maps], [im.labels for im in images])
    if excluded_pos:
        warnings.append(f"{excluded_pos} defect pixels lie outside every scoring window and were excluded")
    roc, pr = roc_curve(s, y), pr_curve(s, y)
    summary = summarize(s, y, excluded)
    summary.update(
        {
            "excluded_positive_pixels": int(excluded_pos),
            "images": len(images),
            "patches_per_second": float(np.mean([m.patches_per_second for m in maps])) if maps else 0.0,
        }
    )
    for w in warnings:
        log.warning(w)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "maps").mkdir(parents=True, exist_ok=True)
        for i, (m, im) in enumerate(zip(maps, images)):
            stem = im.name or f"image_{i:04d}"
            write_amap(out / "maps" / f"{stem}.amap", m.scores)
            write_amap_png(out / "maps" / f"{stem}.png", m.scores)
        write_curve_csv(out / "roc.csv", roc)
        write_curve_csv(out / "pr.csv", pr)
        write_summary(out / "metrics.json", summary)
        if figures:
            from .plots import plot_anomaly_panel, plot_curves

            plot_curves({name: {"ROC": roc, "PR": pr}}, out / "curves")
            (out / "figures").mkdir(exist_ok=True)
            for i, (m, im) in enumerate(zip(maps, images)):
                stem = im.name or f"image_{i:04d}"
                plot_anomaly_panel(im.pixels, m.scores, im.labels, out / "figures" / stem, title=stem)
    return Evaluation(summary, roc, pr, list(maps), warnings)
