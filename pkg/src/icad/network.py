"""The image-completion network and its masked L1 training loss."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .optim import init_bias, init_weights
from .tensor import Tensor

PATCH_SIZE = 128
HOLE_SIZE = 32
SCORE_SIZE = 24
LOSS_LAMBDA = 0.9


class InvalidSpecError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv", "upscale" or "clip"
    k: int = 0
    d: int = 1
    s: int = 1
    c: int = 0
    activation: bool = False

    def __str__(self) -> str:
        if self.kind == "conv":
            return f"Conv({self.k}, {self.d}, {self.s}, {self.c})" + ("-ELU" if self.activation else "")
        if self.kind == "upscale":
            return "BilinearUpscale(2x)"
        return "Clip(-1, 1)"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def _conv(k, d, s, c, act=True):
    return LayerSpec("conv", k, d, s, c, act)


_CANONICAL = [
    (5, 1, 1, 32), (3, 1, 1, 64), (3, 1, 1, 64), (3, 1, 2, 128),
    (3, 1, 1, 128), (3, 1, 1, 128), (3, 2, 1, 128), (3, 4, 1, 128),
    (3, 8, 1, 128), (3, 16, 1, 128), (3, 1, 1, 128), (3, 1, 1, 128),
    "upscale",
    (3, 1, 1, 64), (3, 1, 1, 64), (3, 1, 1, 32), (3, 1, 1, 16), (3, 1, 1, 1),
]  # fmt: skip


def canonical_spec(channel_divisor: int = 1) -> List[LayerSpec]:
    """The 17-convolution completion network; ``channel_divisor=4`` gives the desk-scale variant.

    Every convolution except the last is followed by ELU; the output
    convolution is linear and feeds Clip(-1, 1).
    """
    layers = []
    for i, item in enumerate(_CANONICAL):
        if item == "upscale":
            layers.append(LayerSpec("upscale"))
            continue
        k, d, s, c = item
        last = i == len(_CANONICAL) - 1
        c = c if last else max(1, c // channel_divisor)
        layers.append(_conv(k, d, s, c, act=not last))
    layers.append(LayerSpec("clip"))
    return layers


def desk_spec() -> List[LayerSpec]:
    return canonical_spec(channel_divisor=4)


def spec_from_name(name: str) -> List[LayerSpec]:
    if name == "canonical":
        return canonical_spec()
    if name in ("desk", "desk-scale"):
        return desk_spec()
    raise InvalidSpecError(f"unknown model spec {name!r} (expected 'canonical' or 'desk')")


def spatial_trace(spec: Sequence[LayerSpec], size: int = PATCH_SIZE) -> List[int]:
    """Spatial size after each conv or upscale layer for a ``size``x``size`` input."""
    trace = []
    for layer in spec:
        if layer.kind == "conv":
            pad = layer.d * (layer.k - 1) // 2
            if pad > size - 1:
                raise InvalidSpecError(f"{layer}: mirror padding {pad} too wide for {size}px maps")
            size = math.ceil(size / layer.s)
        elif layer.kind == "upscale":
            size *= 2
        elif layer.kind != "clip":
            raise InvalidSpecError(f"unknown layer kind {layer.kind!r}")
        if layer.kind != "clip":
            trace.append(size)
    return trace


def validate_spec(spec: Sequence[LayerSpec], size: int = PATCH_SIZE, in_channels: int = 1) -> None:
    convs = [l for l in spec if l.kind == "conv"]
    if not convs:
        raise InvalidSpecError("spec has no convolutions")
    for l in convs:
        if l.k % 2 == 0 or l.k < 1 or l.d < 1 or l.s < 1 or l.c < 1:
            raise InvalidSpecError(f"invalid convolution {l}")
    trace = spatial_trace(spec, size)
    if trace[-1] != size:
        raise InvalidSpecError(f"spec maps {size}px input to {trace[-1]}px output")
    if convs[-1].c != in_channels:
        raise InvalidSpecError(f"last convolution has {convs[-1].c} channels, expected {in_channels}")


def parameter_count(spec: Sequence[LayerSpec], in_channels: int = 1) -> int:
    total, cin = 0, in_channels
    for l in spec:
        if l.kind == "conv":
            total += l.k * l.k * cin * l.c + l.c
            cin = l.c
    return total


class CompletionNet:
    """Ordered layers with named kernel/bias tensors."""

    kind = "completion"

    def __init__(self, spec: Sequence[LayerSpec], params: Dict[str, Tensor], in_channels: int = 1):
        self.spec = list(spec)
        self.params = params
        self.in_channels = in_channels

    @property
    def param_names(self) -> List[str]:
        return list(self.params)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)

    def reconstruct(self, patches: np.ndarray, mask: Optional["MaskSpec"] = None) -> np.ndarray:
        """Mask the centre of each (B, 1, H, W) patch and return the completion."""
        mask = mask or MaskSpec(patches.shape[-1])
        with T.no_grad():
            return forward(self, Tensor(mask.apply(patches))).data


def build_network(
    spec: Sequence[LayerSpec],
    rng: np.random.Generator,
    sigma: float = 0.02,
    in_channels: int = 1,
    dtype=np.float32,
    size: int = PATCH_SIZE,
) -> CompletionNet:
    validate_spec(spec, size, in_channels)
    params: Dict[str, Tensor] = {}
    cin = in_channels
    for i, l in enumerate(spec):
        if l.kind != "conv":
            continue
        w = init_weights((l.c, cin, l.k, l.k), rng, sigma, dtype)
        params[f"layer{i:02d}.weight"] = Tensor(w, requires_grad=True)
        params[f"layer{i:02d}.bias"] = Tensor(init_bias((l.c,), dtype), requires_grad=True)
        cin = l.c
    return CompletionNet(spec, params, in_channels)


def forward(net: CompletionNet, x_masked: Tensor) -> Tensor:
    if x_masked.data.ndim != 4 or x_masked.shape[1] != net.in_channels:
        raise ValueError(f"forward: expected (B, {net.in_channels}, H, W) input, got {x_masked.shape}")
    h, w = x_masked.shape[-2:]
    if h != w or spatial_trace(net.spec, h)[-1] != h:
        raise ValueError(f"forward: input size {h}x{w} does not round-trip through the network")
    out = x_masked
    for i, l in enumerate(net.spec):
        if l.kind == "conv":
            out = T.conv2d(out, net.params[f"layer{i:02d}.weight"], net.params[f"layer{i:02d}.bias"], l.d, l.s)
            if l.activation:
                out = T.elu(out)
        elif l.kind == "upscale":
            out = T.bilinear_upscale_2x(out)
        else:
            out = T.clip(out, -1.0, 1.0)
    return out


@dataclass(frozen=True)
class MaskSpec:
    """Centred square hole of ``hole_size`` inside a ``patch_size`` patch."""

    patch_size: int = PATCH_SIZE
    hole_size: int = HOLE_SIZE
    score_size: int = SCORE_SIZE

    def __post_init__(self):
        if not 0 < self.score_size <= self.hole_size < self.patch_size:
            raise ValueError(f"invalid mask geometry {self}")
        if (self.patch_size - self.hole_size) % 2 or (self.hole_size - self.score_size) % 2:
            raise ValueError(f"mask geometry {self} cannot be centred")

    @property
    def hole(self) -> slice:
        lo = (self.patch_size - self.hole_size) // 2
        return slice(lo, lo + self.hole_size)

    @property
    def score(self) -> slice:
        lo = (self.patch_size - self.score_size) // 2
        return slice(lo, lo + self.score_size)

    def mask(self, dtype=np.float32) -> np.ndarray:
        """M: 1 inside the hole, 0 elsewhere."""
        m = np.zeros((self.patch_size, self.patch_size), dtype=dtype)
        m[self.hole, self.hole] = 1
        return m

    def complement(self, dtype=np.float32) -> np.ndarray:
        return 1 - self.mask(dtype)

    def apply(self, patches: np.ndarray) -> np.ndarray:
        """Copy of ``patches`` with the hole set to zero (last two axes)."""
        out = np.array(patches, copy=True)
        out[..., self.hole, self.hole] = 0
        return out


def loss_weights(mask: MaskSpec, lam: float, dtype=np.float32) -> np.ndarray:
    return (lam * mask.mask(np.float64) + (1 - lam) * mask.complement(np.float64)).astype(dtype)


def masked_l1_loss(x, f_out: Tensor, mask: MaskSpec = MaskSpec(), lam: float = LOSS_LAMBDA) -> Tensor:
    """lam * |M (x - F)|_1 / N + (1 - lam) * |(1 - M)(x - F)|_1 / N, averaged over the batch.

    N is the pixel count of one patch.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"masked_l1_loss: lambda must lie in [0, 1], got {lam}")
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    if x.shape != f_out.shape:
        raise ValueError(f"masked_l1_loss: shape mismatch {x.shape} vs {f_out.shape}")
    if x.shape[-2:] != (mask.patch_size, mask.patch_size):
        raise ValueError(f"masked_l1_loss: patches {x.shape[-2:]} do not match mask size {mask.patch_size}")
    return T.weighted_l1(x, f_out, loss_weights(mask, lam, f_out.dtype))
