"""Surface images, training-patch extraction and the synthetic benchmark."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .network import PATCH_SIZE, MaskSpec

IMAGE_SUFFIXES = (".png", ".pgm")
MASK_TAG = "_mask"


class DataError(ValueError):
    pass


# 8-bit <-> normalised ------------------------------------------------------


def to_unit(pixels: np.ndarray) -> np.ndarray:
    """Map 8-bit values to [-1, 1] via v / 127.5 - 1."""
    return (np.asarray(pixels, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(values, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def read_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "1", "P"):
            raise DataError(f"{path}: expected an 8-bit grayscale image, got mode {im.mode}")
        return np.array(im.convert("L"), dtype=np.uint8)


def write_gray(path, pixels: np.ndarray) -> None:
    path = Path(path)
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise DataError("write_gray expects uint8 pixels")
    fmt = "PPM" if path.suffix.lower() == ".pgm" else "PNG"
    Image.fromarray(arr, mode="L").save(path, format=fmt)


@dataclass
class SurfaceImage:
    pixels: np.ndarray  # float32 in [-1, 1]
    labels: Optional[np.ndarray] = None  # uint8, 1 = defect
    roi: Optional[np.ndarray] = None
    name: str = ""
    defects: List[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.labels is not None and self.labels.shape != self.pixels.shape:
            raise DataError(f"label mask {self.labels.shape} does not match image {self.pixels.shape}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape


def load_image(path, mask_path=None) -> SurfaceImage:
    path = Path(path)
    labels = None
    if mask_path is not None:
        labels = (read_gray(mask_path) > 127).astype(np.uint8)
    return SurfaceImage(to_unit(read_gray(path)), labels, name=path.stem)


def save_image(path, image: SurfaceImage, with_mask: bool = False) -> None:
    path = Path(path)
    write_gray(path, to_uint8(image.pixels))
    if with_mask and image.labels is not None:
        write_gray(mask_path_for(path), image.labels.astype(np.uint8) * 255)


def mask_path_for(path) -> Path:
    path = Path(path)
    return path.with_name(f"{path.stem}{MASK_TAG}{path.suffix}")


def list_images(directory) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    return sorted(
        p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and not p.stem.endswith(MASK_TAG)
    )


def load_directory(directory, with_masks: bool = False) -> Tuple[List[SurfaceImage], List[str]]:
    """Images of a dataset split; returns (images, warnings).

    With ``with_masks`` every image needs ``<name>_mask.<ext>``; images
    without one are skipped with a warning.
    """
    images, warnings = [], []
    for p in list_images(directory):
        if with_masks:
            mp = mask_path_for(p)
            if not mp.exists():
                warnings.append(f"{p.name}: no label mask {mp.name}, image excluded")
                continue
            images.append(load_image(p, mp))
        else:
            images.append(load_image(p))
    return images, warnings


# patch extraction ----------------------------------------------------------


@dataclass
class AugmentConfig:
    rotation: bool = True
    flip: bool = True
    scale: bool = True
    brightness: bool = True
    max_rotation: float = 180.0
    scale_range: Tuple[float, float] = (0.9, 1.1)
    max_brightness: float = 0.1

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(rotation=False, flip=False, scale=False, brightness=False)

    def crop_size(self, patch_size: int = PATCH_SIZE) -> int:
        """Side of the oversized crop that keeps every transformed sample inside.

        182 for a 128 patch under arbitrary rotation; larger when zooming out.
        """
        reach = (patch_size - 1) / 2
        if self.rotation:
            reach *= math.sqrt(2)
        if self.scale:
            reach /= min(self.scale_range)
        return max(math.ceil(patch_size * math.sqrt(2)), math.ceil(2 * reach) + 1)


@dataclass
class PatchSample:
    patch: np.ndarray
    mask: MaskSpec = field(default_factory=MaskSpec)
    labels: Optional[np.ndarray] = None

    def masked(self) -> np.ndarray:
        return apply_mask(self)


def extract_training_patch(
    image: SurfaceImage,
    rng: np.random.Generator,
    aug: Optional[AugmentConfig] = None,
    patch_size: int = PATCH_SIZE,
    position: Optional[Tuple[int, int]] = None,
) -> PatchSample:
    """Random oversized crop, augmented, then centre-cropped to ``patch_size``.

    ``position`` pins the top-left corner of the oversized crop.
    """
    aug = aug or AugmentConfig()
    size = aug.crop_size(patch_size)
    h, w = image.shape
    if h < size or w < size:
        raise DataError(f"image {h}x{w} is smaller than the {size}x{size} oversized crop")
    if position is None:
        y0 = int(rng.integers(0, h - size + 1))
        x0 = int(rng.integers(0, w - size + 1))
    else:
        y0, x0 = position
        if not (0 <= y0 <= h - size and 0 <= x0 <= w - size):
            raise DataError(f"crop position {position} outside the image")
    crop = image.pixels[y0 : y0 + size, x0 : x0 + size]
    labels = None if image.labels is None else image.labels[y0 : y0 + size, x0 : x0 + size]

    angle = float(rng.uniform(-aug.max_rotation, aug.max_rotation)) if aug.rotation else 0.0
    zoom = float(rng.uniform(*aug.scale_range)) if aug.scale else 1.0
    if angle == 0.0 and zoom == 1.0:
        lo = (size - patch_size) // 2
        patch = crop[lo : lo + patch_size, lo : lo + patch_size].copy()
        if labels is not None:
            labels = labels[lo : lo + patch_size, lo : lo + patch_size].copy()
    else:
        patch = _resample(crop, angle, zoom, patch_size, order=1)
        if np.isnan(patch).any():
            raise AssertionError("transformed patch sampled outside the oversized crop")
        if labels is not None:
            labels = (_resample(labels.astype(np.float32), angle, zoom, patch_size, order=0) > 0.5).astype(np.uint8)

    if aug.flip:
        if rng.random() < 0.5:
            patch, labels = patch[:, ::-1], None if labels is None else labels[:, ::-1]
        if rng.random() < 0.5:
            patch, labels = patch[::-1, :], None if labels is None else labels[::-1, :]
    if aug.brightness:
        patch = patch + np.float32(rng.uniform(-aug.max_brightness, aug.max_brightness))
    patch = np.clip(patch, -1, 1).astype(np.float32)
    labels = None if labels is None else np.ascontiguousarray(labels)
    return PatchSample(np.ascontiguousarray(patch), MaskSpec(patch_size), labels)


def _resample(crop: np.ndarray, angle_deg: float, zoom: float, out_size: int, order: int) -> np.ndarray:
    """Rotate by ``angle_deg`` and magnify by ``zoom`` about the crop centre."""
    c = (crop.shape[0] - 1) / 2
    off = np.arange(out_size) - (out_size - 1) / 2
    yy, xx = np.meshgrid(off, off, indexing="ij")
    t = math.radians(angle_deg)
    cos, sin = math.cos(t), math.sin(t)
    sy = c + (cos * yy - sin * xx) / zoom
    sx = c + (sin * yy + cos * xx) / zoom
    return ndimage.map_coordinates(crop, [sy, sx], order=order, mode="constant", cval=np.nan).astype(np.float32)


def apply_mask(sample: PatchSample) -> np.ndarray:
    """Patch with the central hole set to zero."""
    return sample.mask.apply(sample.patch)


def split_seeds(seed: int, n: int) -> List[np.random.Generator]:
    """Independent generators for ``n`` workers, derived by SeedSequence.spawn."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


# synthetic surfaces -----------------------------------------------------------


@dataclass
class TextureSpec:
    """Procedural decor plus defect injection settings.

    ``family`` is "grid" (periodic line grid) or "waves" (interference of
    plane waves). Jitter values are per-image random perturbations.
    """

    family: str = "grid"
    height: int = 256
    width: int = 256
    period: float = 16.0
    orientation: float = 0.0
    amplitude: float = 0.5
    orientation_jitter: float = 5.0
    period_jitter: float = 0.05
    phase_jitter: float = 1.0
    warp: float = 1.5
    brightness_jitter: float = 0.05
    noise: float = 0.02
    n_defects_min: int = 0
    n_defects_max: int = 0
    defect_size_min: int = 6
    defect_size_max: int = 20
    defect_contrast_min: float = 0.4
    defect_contrast_max: float = 0.8
    defect_margin: int = 56
    n_train: int = 16
    n_val: int = 4
    n_test: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.family not in ("grid", "waves"):
            raise ValueError(f"unknown texture family {self.family!r}")
        if self.period < 2:
            raise ValueError(f"period must be at least 2 px, got {self.period}")
        if not 1 <= self.defect_size_min <= self.defect_size_max <= 24:
            raise ValueError("defect sizes must satisfy 1 <= min <= max <= 24")
        if self.n_defects_min > self.n_defects_max or self.n_defects_min < 0:
            raise ValueError("invalid defect count range")
        if self.height < 1 or self.width < 1:
            raise ValueError("image size must be positive")

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]


def benchmark_spec(seed: int = 0, family: str = "grid") -> TextureSpec:
    """The seeded periodic-texture benchmark: 1 to 3 defects per test image."""
    return TextureSpec(family=family, n_defects_min=1, n_defects_max=3, seed=seed)


def generate_surface(spec: TextureSpec, rng: np.random.Generator, defects: Optional[bool] = None) -> SurfaceImage:
    """Render one decor image; inject defects when ``defects`` (default: spec count > 0)."""
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    theta = math.radians(spec.orientation + spec.orientation_jitter * rng.uniform(-1, 1))
    period = spec.period * (1 + spec.period_jitter * rng.uniform(-1, 1))
    phase = spec.phase_jitter * rng.uniform(0, 1, size=4)
    if spec.warp > 0:
        # smooth low-frequency distortion of the decor
        kw = rng.uniform(0.5, 1.5, size=4) * 2 * math.pi / max(h, w)
        pw = rng.uniform(0, 2 * math.pi, size=4)
        yy = yy + spec.warp * np.sin(kw[0] * xx + pw[0]) * np.cos(kw[1] * yy + pw[1])
        xx = xx + spec.warp * np.sin(kw[2] * yy + pw[2]) * np.cos(kw[3] * xx + pw[3])
    u = math.cos(theta) * xx + math.sin(theta) * yy
    v = -math.sin(theta) * xx + math.cos(theta) * yy
    if spec.family == "grid":
        lu = (0.5 + 0.5 * np.cos(2 * math.pi * (u / period + phase[0]))) ** 6
        lv = (0.5 + 0.5 * np.cos(2 * math.pi * (v / period + phase[1]))) ** 6
        base = 2 * np.maximum(lu, lv) - 1
    else:
        waves = [
            np.cos(2 * math.pi * (u / period + phase[0])),
            np.cos(2 * math.pi * ((0.5 * u + 0.866 * v) / (1.3 * period) + phase[1])),
            np.cos(2 * math.pi * ((-0.5 * u + 0.866 * v) / (0.8 * period) + phase[2])),
        ]
        base = sum(waves) / 3
    img = spec.amplitude * base + spec.brightness_jitter * rng.uniform(-1, 1)
    if spec.noise > 0:
        img = img + spec.noise * rng.standard_normal((h, w))
    img = np.clip(img, -1, 1)

    labels = np.zeros((h, w), dtype=np.uint8)
    records: List[dict] = []
    inject = (spec.n_defects_max > 0) if defects is None else defects
    if inject:
        n = int(rng.integers(max(spec.n_defects_min, 1 if defects else 0), spec.n_defects_max + 1))
        for _ in range(n):
            rec = _place_defect(spec, rng)
            support = defect_support(rec, (h, w))
            img = np.where(support, np.clip(img + rec["polarity"] * rec["contrast"], -1, 1), img)
            labels[support] = 1
            records.append(rec)
    pixels = to_unit(to_uint8(img))
    return SurfaceImage(pixels, labels, name="", defects=records)


def _place_defect(spec: TextureSpec, rng: np.random.Generator) -> dict:
    size = int(rng.integers(spec.defect_size_min, spec.defect_size_max + 1))
    m = spec.defect_margin + size
    if spec.height - 2 * m < 1 or spec.width - 2 * m < 1:
        m = size
    cy = int(rng.integers(m, max(m + 1, spec.height - m)))
    cx = int(rng.integers(m, max(m + 1, spec.width - m)))
    kind = "blob" if rng.random() < 0.6 else "scratch"
    return {
        "kind": kind,
        "cy": cy,
        "cx": cx,
        "size": size,
        "aspect": float(rng.uniform(0.5, 1.0)) if kind == "blob" else float(rng.uniform(0.1, 0.2)),
        "angle": float(rng.uniform(0, math.pi)),
        "contrast": float(rng.uniform(spec.defect_contrast_min, spec.defect_contrast_max)),
        "polarity": -1.0 if rng.random() < 0.5 else 1.0,
    }


def defect_support(rec: dict, shape: Tuple[int, int]) -> np.ndarray:
    """Boolean pixel support of a placed defect (ellipse of major axis ``size``)."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - rec["cy"], xx - rec["cx"]
    a = rec["size"] / 2
    b = max(a * rec["aspect"], 1.0)
    c, s = math.cos(rec["angle"]), math.sin(rec["angle"])
    along = c * dx + s * dy
    across = -s * dx + c * dy
    inside = (along / a) ** 2 + (across / b) ** 2 <= 1.0
    # keep the support inside the declared bounding box
    half = rec["size"] // 2
    box = (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if rec["size"] % 2 == 0:
        box &= (dy < half) & (dx < half)
    return inside & box


def write_dataset(spec: TextureSpec, out_dir, suffix: str = ".png") -> dict:
    """train/ and val/ fault-free, test/ with defects and ``_mask`` label images."""
    out_dir = Path(out_dir)
    rngs = dict(zip(("train", "val", "test"), split_seeds(spec.seed, 3)))
    counts = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    for split, n in counts.items():
        d = out_dir / split
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            defective = split == "test" and spec.n_defects_max > 0
            img = generate_surface(spec, rngs[split], defects=defective)
            path = d / f"{split}_{i:04d}{suffix}"
            save_image(path, img, with_mask=(split == "test"))
    return counts
