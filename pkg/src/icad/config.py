"""Run configuration stored as flat ``key = value`` text."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .network import LOSS_LAMBDA
from .optim import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, ADAM_LR
from .scoring import STRIDE

MODEL_KINDS = ("canonical", "desk", "autoencoder")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: str = "canonical"
    loss_lambda: float = LOSS_LAMBDA
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    init_sigma: float = 0.02
    batch_size: int = 128
    batches: int = 100_000
    seed: int = 0
    aug_rotation: bool = True
    aug_flip: bool = True
    aug_scale: bool = True
    aug_brightness: bool = True
    train_dir: str = "data/train"
    val_dir: str = "data/val"
    test_dir: str = "data/test"
    stride: int = STRIDE
    output_dir: str = "runs/default"
    checkpoint_every: int = 5000
    val_every: int = 500
    val_patches: int = 64
    scan_batch: int = 8

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if not 0.0 <= self.loss_lambda <= 1.0:
            raise ConfigError("loss_lambda must lie in [0, 1]")
        if self.lr <= 0 or self.eps <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("invalid optimizer hyperparameters")
        if self.init_sigma <= 0:
            raise ConfigError("init_sigma must be positive")
        if self.batch_size < 1 or self.batches < 0:
            raise ConfigError("batch_size must be >= 1 and batches >= 0")
        if self.stride < 1 or self.checkpoint_every < 1 or self.val_every < 1 or self.scan_batch < 1:
            raise ConfigError("stride, checkpoint_every, val_every and scan_batch must be positive")
        if self.val_patches < 0:
            raise ConfigError("val_patches must be >= 0")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = ["# icad run configuration"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_fmt(v)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, base: Optional["RunConfig"] = None) -> "RunConfig":
        values = parse_key_values(text)
        return cls.from_mapping(values, base)

    @classmethod
    def from_mapping(cls, values: dict, base: Optional["RunConfig"] = None) -> "RunConfig":
        base = base or cls()
        known = {f.name: f for f in fields(cls)}
        changes = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = coerce(raw, type(getattr(base, key)), key)
        return dataclasses.replace(base, **changes)

    @classmethod
    def load(cls, path, base: Optional["RunConfig"] = None) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_text(text, base)


def desk_config(**overrides) -> RunConfig:
    """Quartered channels and a CPU-sized training budget."""
    cfg = RunConfig(
        model="desk",
        batch_size=16,
        batches=2000,
        checkpoint_every=500,
        val_every=100,
        val_patches=16,
    )
    return cfg.replace(**overrides)


def parse_key_values(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        out[key] = value
    return out


def coerce(raw, typ, key: str = "value"):
    if not isinstance(raw, str):
        return typ(raw)
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            try:
                return int(raw.replace("_", ""))
            except ValueError:
                f = float(raw)  # allows "1e5"
                if not f.is_integer():
                    raise
                return int(f)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)
