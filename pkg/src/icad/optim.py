"""ADAM and weight initialisation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .tensor import Tensor

ADAM_LR = 0.0002
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class OptimizerStateError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]], state: AdamState) -> None:
    """One in-place ADAM update of ``params`` using bias-corrected moments."""
    if len(params) != len(grads):
        raise OptimizerStateError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, g in enumerate(grads):
        if g is None:
            raise OptimizerStateError(f"parameter {i} has no gradient")
        if g.shape != params[i].shape:
            raise OptimizerStateError(f"gradient {i} has shape {g.shape}, parameter has {params[i].shape}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


class Adam:
    """Owns a list of parameter tensors and steps them from their ``grad``."""

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = ADAM_LR,
        beta1: float = ADAM_BETA1,
        beta2: float = ADAM_BETA2,
        eps: float = ADAM_EPS,
    ):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)

    def state_arrays(self, names: Sequence[str]) -> Dict[str, np.ndarray]:
        out = {}
        for name, m, v in zip(names, self.state.m, self.state.v):
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = v
        return out

    def load_state_arrays(self, names: Sequence[str], arrays: Dict[str, np.ndarray], t: int) -> None:
        self.state.m = [np.array(arrays[f"adam.m.{n}"]) for n in names]
        self.state.v = [np.array(arrays[f"adam.v.{n}"]) for n in names]
        self.state.t = t


def init_weights(shape, rng: np.random.Generator, sigma: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Zero-mean Gaussian samples truncated to (-2 sigma, 2 sigma) by resampling."""
    if not sigma > 0:
        raise ValueError(f"init_weights: sigma must be positive, got {sigma}")
    n = int(np.prod(shape))
    out = rng.standard_normal(n)
    bad = np.abs(out) >= 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) >= 2.0
    return (out * sigma).reshape(shape).astype(dtype)


def init_bias(shape, dtype=np.float32) -> np.ndarray:
    return np.zeros(shape, dtype=dtype)
