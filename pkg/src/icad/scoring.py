"""Sliding-window anomaly maps from centre-region reconstruction errors."""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .data import DataError, PatchSample, SurfaceImage, write_gray
from .network import MaskSpec

STRIDE = 16
AMAP_MAGIC = b"AMAP"
AMAP_VERSION = 1
_AMAP_HEADER = struct.Struct("<4sIII")


@dataclass
class AnomalyMap:
    """Per-pixel scores; NaN marks pixels outside every scoring block."""

    scores: np.ndarray  # float32
    coverage: np.ndarray  # int32, number of scoring blocks per pixel
    patches_per_second: float = 0.0
    windows: int = 0

    @property
    def scored(self) -> np.ndarray:
        return ~np.isnan(self.scores)


def score_patch(model, patch, mask: Optional[MaskSpec] = None) -> np.ndarray:
    """|x - reconstruction| on the centred scoring block of one unmasked patch."""
    x = patch.patch if isinstance(patch, PatchSample) else np.asarray(patch, dtype=np.float32)
    mask = mask or (patch.mask if isinstance(patch, PatchSample) else MaskSpec(x.shape[-1]))
    rec = model.reconstruct(x.reshape(1, 1, *x.shape[-2:]), mask)[0, 0]
    return np.abs(x[mask.score, mask.score] - rec[mask.score, mask.score])


def window_offsets(n: int, window: int, stride: int = STRIDE) -> List[int]:
    """Window origins at ``stride`` spacing; the last one is clamped to the border."""
    if n < window:
        raise DataError(f"image extent {n} is smaller than the {window}px window")
    offs = list(range(0, n - window + 1, stride))
    if offs[-1] != n - window:
        offs.append(n - window)
    return offs


def scan_image(
    model,
    image,
    stride: int = STRIDE,
    mask: Optional[MaskSpec] = None,
    batch_size: int = 8,
) -> AnomalyMap:
    """Score every window and merge overlapping blocks by per-pixel maximum."""
    pixels = image.pixels if isinstance(image, SurfaceImage) else np.asarray(image, dtype=np.float32)
    mask = mask or MaskSpec()
    p = mask.patch_size
    h, w = pixels.shape
    if h < p or w < p:
        raise DataError(f"image {h}x{w} is smaller than one {p}x{p} window")
    origins = [(y, x) for y in window_offsets(h, p, stride) for x in window_offsets(w, p, stride)]
    scores = np.full((h, w), np.nan, dtype=np.float32)
    coverage = np.zeros((h, w), dtype=np.int32)
    lo, n = mask.score.start, mask.score_size
    start = time.perf_counter()
    for b in range(0, len(origins), batch_size):
        chunk = origins[b : b + batch_size]
        batch = np.stack([pixels[y : y + p, x : x + p] for y, x in chunk])[:, None].astype(np.float32)
        rec = model.reconstruct(batch, mask)
        err = np.abs(batch[:, 0, mask.score, mask.score] - rec[:, 0, mask.score, mask.score])
        for (y, x), block in zip(chunk, err):
            region = (slice(y + lo, y + lo + n), slice(x + lo, x + lo + n))
            scores[region] = np.fmax(scores[region], block)
            coverage[region] += 1
    elapsed = time.perf_counter() - start
    rate = len(origins) / elapsed if elapsed > 0 else float("inf")
    return AnomalyMap(scores, coverage, rate, len(origins))


# file formats ---------------------------------------------------------------


def write_amap(path, scores: np.ndarray) -> None:
    """Little-endian: b"AMAP", u32 version, u32 height, u32 width, row-major f32."""
    scores = np.asarray(scores, dtype="<f4")
    if scores.ndim != 2:
        raise ValueError("anomaly map must be 2-D")
    h, w = scores.shape
    with open(path, "wb") as fh:
        fh.write(_AMAP_HEADER.pack(AMAP_MAGIC, AMAP_VERSION, h, w))
        fh.write(np.ascontiguousarray(scores).tobytes())


def read_amap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _AMAP_HEADER.size:
        raise ValueError(f"{path}: truncated AMAP header")
    magic, version, h, w = _AMAP_HEADER.unpack_from(raw)
    if magic != AMAP_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != AMAP_VERSION:
        raise ValueError(f"{path}: unsupported AMAP version {version}")
    body = raw[_AMAP_HEADER.size :]
    if len(body) != 4 * h * w:
        raise ValueError(f"{path}: expected {4 * h * w} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)


def normalize_for_display(scores: np.ndarray) -> np.ndarray:
    """Min-max scale scored pixels to 0..255; unscored pixels become 0."""
    out = np.zeros(scores.shape, dtype=np.uint8)
    valid = ~np.isnan(scores)
    if not valid.any():
        return out
    lo, hi = float(scores[valid].min()), float(scores[valid].max())
    if hi > lo:
        out[valid] = np.rint((scores[valid] - lo) / (hi - lo) * 255).astype(np.uint8)
    return out


def write_amap_png(path, scores: np.ndarray) -> None:
    write_gray(path, normalize_for_display(scores))
