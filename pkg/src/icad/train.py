"""Training loop shared by the completion network and the autoencoder."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .baselines import build_autoencoder, l1_loss
from .config import RunConfig
from .data import AugmentConfig, DataError, SurfaceImage, extract_training_patch, split_seeds
from .network import MaskSpec, build_network, masked_l1_loss, spec_from_name
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)


class PatchSource:
    """Draws training patches from surface images or from a fixed patch array."""

    def __init__(self, data, aug: AugmentConfig, patch_size: int = 128):
        self.patch_size = patch_size
        self.aug = aug
        if isinstance(data, np.ndarray):
            if data.ndim != 3 or data.shape[1:] != (patch_size, patch_size) or len(data) == 0:
                raise DataError(f"patch array must be (N, {patch_size}, {patch_size}) with N > 0")
            self.patches, self.images = data.astype(np.float32), None
        else:
            images = list(data)
            if not images:
                raise DataError("no training images")
            self.patches, self.images = None, images

    def batch(self, n: int, rng: np.random.Generator, aug: Optional[AugmentConfig] = None) -> np.ndarray:
        if self.patches is not None:
            idx = rng.integers(0, len(self.patches), size=n)
            return self.patches[idx][:, None].copy()
        aug = self.aug if aug is None else aug
        out = np.empty((n, 1, self.patch_size, self.patch_size), dtype=np.float32)
        for i in range(n):
            img = self.images[int(rng.integers(0, len(self.images)))]
            out[i, 0] = extract_training_patch(img, rng, aug, self.patch_size).patch
        return out


def augment_config(config: RunConfig) -> AugmentConfig:
    return AugmentConfig(
        rotation=config.aug_rotation, flip=config.aug_flip, scale=config.aug_scale, brightness=config.aug_brightness
    )


def build_model(config: RunConfig, rng: np.random.Generator, kind: Optional[str] = None):
    kind = kind or config.model
    if kind == "autoencoder":
        return build_autoencoder(rng, config.init_sigma)
    return build_network(spec_from_name(kind), rng, config.init_sigma)


def batch_loss(model, x: np.ndarray, config: RunConfig, mask: MaskSpec) -> Tensor:
    if model.kind == "autoencoder":
        return l1_loss(x, model(Tensor(x)))
    return masked_l1_loss(x, model(Tensor(mask.apply(x))), mask, config.loss_lambda)


@dataclass
class TrainResult:
    model: object
    optimizer: Adam
    log: List[dict] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    best_path: Optional[Path] = None
    seconds: float = 0.0


def train_model(
    data,
    config: RunConfig,
    kind: Optional[str] = None,
    val_data=None,
    run_dir=None,
    on_batch: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Train from scratch; writes loss log and checkpoints when ``run_dir`` is set.

    Seeds: ``config.seed`` is split into independent streams for weight
    initialisation, training patches and validation patches.
    """
    from .checkpoint import save_checkpoint

    init_rng, patch_rng, val_rng = split_seeds(config.seed, 3)
    mask = MaskSpec()
    source = PatchSource(data, augment_config(config))
    val_x = None
    if val_data is not None and config.val_patches > 0:
        val_x = PatchSource(val_data, AugmentConfig.disabled()).batch(config.val_patches, val_rng)

    model = build_model(config, init_rng, kind)
    opt = Adam(model.parameters(), config.lr, config.beta1, config.beta2, config.eps)
    result = TrainResult(model, opt)

    run_dir = Path(run_dir) if run_dir is not None else None
    log_fh = writer = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        config.save(run_dir / "config.txt")
        log_fh = open(run_dir / "loss_log.csv", "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(["batch", "train_loss", "val_loss"])

    def validate() -> Optional[float]:
        if val_x is None:
            return None
        with T.no_grad():
            return float(batch_loss(model, val_x, config, mask).data)

    def checkpoint(name: str) -> Path:
        path = run_dir / name
        save_checkpoint(path, model, config, opt)
        return path

    best = np.inf
    start = time.perf_counter()
    try:
        if config.batches == 0 and run_dir is not None:
            result.checkpoints.append(checkpoint("ckpt_000000.icad"))
        for step in range(1, config.batches + 1):
            x = source.batch(config.batch_size, patch_rng)
            opt.zero_grad()
            loss = batch_loss(model, x, config, mask)
            loss.backward()
            opt.step()
            train_loss = float(loss.data)
            val_loss = validate() if (step % config.val_every == 0 or step == config.batches) else None
            row = {"batch": step, "train_loss": train_loss, "val_loss": val_loss}
            result.log.append(row)
            if writer is not None:
                writer.writerow([step, repr(train_loss), "" if val_loss is None else repr(val_loss)])
                log_fh.flush()
            if on_batch is not None:
                on_batch(step, train_loss)
            if run_dir is not None:
                if step % config.checkpoint_every == 0:
                    result.checkpoints.append(checkpoint(f"ckpt_{step:06d}.icad"))
                if val_loss is not None and val_loss < best:
                    best = val_loss
                    result.best_path = checkpoint("best.icad")
            if step % max(1, config.val_every) == 0:
                log.info("batch %d train %.5f val %s", step, train_loss, val_loss)
        if run_dir is not None:
            result.checkpoints.append(checkpoint("last.icad"))
    finally:
        if log_fh is not None:
            log_fh.close()
    result.seconds = time.perf_counter() - start
    return result
