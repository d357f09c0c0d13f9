"""Fully connected autoencoder baseline on 32x32 downscaled patches."""

from __future__ import annotations

from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .network import PATCH_SIZE, MaskSpec
from .optim import init_bias, init_weights
from .tensor import Tensor

CODE_SIZE = 32
BOTTLENECK = 128


class AutoencoderNet:
    """bilinear 128->32, FC(32^2, 128), ReLU, FC(128, 32^2), bilinear 32->128."""

    kind = "autoencoder"

    def __init__(self, params: Dict[str, Tensor], code_size: int = CODE_SIZE, patch_size: int = PATCH_SIZE):
        self.params = params
        self.code_size = code_size
        self.patch_size = patch_size
        self.spec: List = []

    @property
    def param_names(self) -> List[str]:
        return list(self.params)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def __call__(self, x: Tensor) -> Tensor:
        return autoencoder_forward(self, x)

    def reconstruct(self, patches: np.ndarray, mask: Optional[MaskSpec] = None) -> np.ndarray:
        """Reconstruction of the full, unmasked patches (``mask`` is ignored)."""
        with T.no_grad():
            return autoencoder_forward(self, Tensor(np.asarray(patches, dtype=np.float32))).data


def build_autoencoder(
    rng: np.random.Generator,
    sigma: float = 0.02,
    code_size: int = CODE_SIZE,
    bottleneck: int = BOTTLENECK,
    patch_size: int = PATCH_SIZE,
) -> AutoencoderNet:
    n = code_size * code_size
    params = {
        "fc1.weight": Tensor(init_weights((bottleneck, n), rng, sigma), requires_grad=True),
        "fc1.bias": Tensor(init_bias((bottleneck,)), requires_grad=True),
        "fc2.weight": Tensor(init_weights((n, bottleneck), rng, sigma), requires_grad=True),
        "fc2.bias": Tensor(init_bias((n,)), requires_grad=True),
    }
    return AutoencoderNet(params, code_size, patch_size)


def autoencoder_forward(net: AutoencoderNet, x: Tensor) -> Tensor:
    if x.data.ndim != 4 or x.shape[1:] != (1, net.patch_size, net.patch_size):
        raise ValueError(f"autoencoder: expected (B, 1, {net.patch_size}, {net.patch_size}) input, got {x.shape}")
    b, c = x.shape[0], net.code_size
    h = T.resize_bilinear(x, c, c).reshape(b, c * c)
    h = T.relu(T.linear(h, net.params["fc1.weight"], net.params["fc1.bias"]))
    h = T.linear(h, net.params["fc2.weight"], net.params["fc2.bias"]).reshape(b, 1, c, c)
    return T.resize_bilinear(h, net.patch_size, net.patch_size)


def l1_loss(x, recon: Tensor) -> Tensor:
    """Mean absolute reconstruction error over all pixels."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    return T.weighted_l1(x, recon, np.ones(x.shape[-2:], dtype=recon.dtype))


def train_autoencoder(data, config) -> AutoencoderNet:
    """Train on fault-free images or an array of (N, 128, 128) patches.

    ``config`` is a :class:`icad.config.RunConfig`; the model field is ignored.
    """
    from .train import train_model

    return train_model(data, config, kind="autoencoder").model
