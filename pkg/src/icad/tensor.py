"""Dense tensors with reverse-mode automatic differentiation.

Only the operations needed by the completion network, its loss and the
autoencoder baseline are provided. Arrays are plain numpy arrays; 4-D data is
laid out as (batch, channel, height, width).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

Scalar = Union[int, float]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording, e.g. for inference."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array that records how it was computed.

    ``grad`` is accumulated by :meth:`backward` for every tensor in the graph
    with ``requires_grad`` set.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        _parents: Sequence["Tensor"] = (),
        _op: str = "",
    ):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(_parents)
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = _op

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op or 'leaf'})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __abs__(self):
        return absolute(self)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, *shape):
        return reshape(self, *shape)

    # differentiation ------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable tensor's ``grad``.

        ``self`` must be a scalar unless an explicit upstream ``grad`` is given.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node._accumulate(g)
            if node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not _needs_grad(parent):
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Iterable[Tensor], op: str, backward) -> Tensor:
    parents = tuple(parents)
    track = _grad_enabled and any(_needs_grad(p) for p in parents)
    out = Tensor(data, _parents=parents if track else (), _op=op)
    if out._parents:
        out._backward = backward
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if b.data.ndim and a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


# elementwise ---------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_same_shape(a, b, "add")
    scalar_b = b.data.ndim == 0

    def backward(g):
        return g, (g.sum() if scalar_b else g)

    return _make(a.data + b.data, (a, b), "add", backward)


def sub(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_same_shape(a, b, "sub")
    scalar_b = b.data.ndim == 0

    def backward(g):
        return g, (-g.sum() if scalar_b else -g)

    return _make(a.data - b.data, (a, b), "sub", backward)


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_same_shape(a, b, "mul")
    scalar_b = b.data.ndim == 0

    def backward(g):
        ga = g * b.data
        gb = (g * a.data).sum() if scalar_b else g * a.data
        return ga, gb

    return _make(a.data * b.data, (a, b), "mul", backward)


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), "abs", lambda g: (g * sign,))


def elu(x: Tensor) -> Tensor:
    """x for x > 0, exp(x) - 1 otherwise."""
    out = np.maximum(x.data, 0)
    out += np.expm1(np.minimum(x.data, 0))

    def backward(g):
        # derivative is exp(x) = out + 1 on the negative side, 1 elsewhere
        return (g * np.minimum(out + 1, 1),)

    return _make(out, (x,), "elu", backward)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), "relu", lambda g: (g * pos,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is 1 strictly inside and 0 elsewhere."""
    if not lo < hi:
        raise ValueError(f"clip: need lo < hi, got lo={lo}, hi={hi}")
    inside = (x.data > lo) & (x.data < hi)
    return _make(np.clip(x.data, lo, hi), (x,), "clip", lambda g: (g * inside,))


# reductions and reshapes ----------------------------------------------------


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(
        np.asarray(x.data.sum(), dtype=x.dtype),
        (x,),
        "sum",
        lambda g: (np.broadcast_to(g, shape).astype(x.dtype),),
    )


def tensor_mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        "mean",
        lambda g: (np.broadcast_to(g / n, shape).astype(x.dtype),),
    )


def reshape(x: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = x.shape
    return _make(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(old),))


# dense layers ---------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (B, in) and weight (out, in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _make(out, (x, weight, bias), "linear", backward)


# convolution ----------------------------------------------------------------


def mirror_pad(a: np.ndarray, pad: int) -> np.ndarray:
    """Reflect the last two axes by ``pad`` without repeating the edge pixel."""
    if pad == 0:
        return a
    h, w = a.shape[-2:]
    if pad > h - 1 or pad > w - 1:
        raise ValueError(f"mirror padding of {pad} is wider than a {h}x{w} input allows")
    widths = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(a, widths, mode="reflect")


def mirror_pad_adjoint(g: np.ndarray, pad: int) -> np.ndarray:
    """Transpose of :func:`mirror_pad`: fold border gradients back inside."""
    return _fold_axis(_fold_axis(g, pad, g.ndim - 2), pad, g.ndim - 1)


def _fold_axis(g: np.ndarray, pad: int, axis: int) -> np.ndarray:
    if pad == 0:
        return g
    n = g.shape[axis] - 2 * pad
    g = np.moveaxis(g, axis, 0)
    out = g[pad : pad + n].copy()
    out[1 : pad + 1] += g[:pad][::-1]
    out[n - 1 - pad : n - 1] += g[pad + n :][::-1]
    return np.moveaxis(out, 0, axis)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, dilation: int = 1, stride: int = 1) -> Tensor:
    """Dilated, strided 2-D convolution with mirror padding.

    Each side is padded by ``dilation * (k - 1) // 2`` so the output has
    ``ceil(H / stride)`` rows and ``ceil(W / stride)`` columns. Shapes are
    (B, C, H, W); the result is stored channels-last in memory, which keeps
    the im2col matrix pixel-major for the matrix multiply.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and kernel, got {x.shape}, {kernel.shape}")
    b, cin, h, w = x.shape
    cout, kcin, k, k2 = kernel.shape
    if kcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if dilation < 1 or stride < 1:
        raise ValueError("conv2d: dilation and stride must be positive")
    pad = dilation * (k - 1) // 2
    if pad > h - 1 or pad > w - 1:
        raise ValueError(f"conv2d: mirror padding of {pad} is wider than a {h}x{w} input allows")
    xp = np.pad(_nhwc(x.data), ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")
    ho, wo = math.ceil(h / stride), math.ceil(w / stride)
    cols = _im2col(xp, k, dilation, stride, ho, wo)  # (B*Ho*Wo, k*k*Cin)
    wmat = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0)).reshape(k * k * cin, cout)
    out = cols @ wmat
    out += bias.data
    out = out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = _nhwc(g)
        gw = (cols.T @ g2.reshape(-1, cout)).reshape(k, k, cin, cout).transpose(3, 2, 0, 1)
        gb = g2.reshape(-1, cout).sum(axis=0)
        gx = None
        if _needs_grad(x):
            gxp = _conv_input_grad(g2, wmat.reshape(k, k, cin, cout), xp.shape, dilation, stride)
            gx = _fold_axis(_fold_axis(gxp, pad, 1), pad, 2).transpose(0, 3, 1, 2)
        return gx, np.ascontiguousarray(gw), gb

    return _make(out, (x, kernel, bias), "conv2d", backward)


def _nhwc(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1))


def _im2col(xp: np.ndarray, k: int, d: int, s: int, ho: int, wo: int) -> np.ndarray:
    """(B*Ho*Wo, k*k*C) patch matrix of a channels-last padded array."""
    b, c = xp.shape[0], xp.shape[3]
    sb, sh, sw, sc = xp.strides
    view = as_strided(xp, (b, ho, wo, k, k, c), (sb, s * sh, s * sw, d * sh, d * sw, sc), writeable=False)
    return np.ascontiguousarray(view).reshape(b * ho * wo, k * k * c)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, xp_shape: tuple, d: int, s: int) -> np.ndarray:
    """Gradient w.r.t. the padded input, as a correlation with the flipped kernel.

    ``g`` is (B, Ho, Wo, Cout) channels-last, ``w`` is (k, k, Cin, Cout).
    Spreading ``g`` to stride positions and zero padding by d*(k-1) turns the
    scatter of the forward pass into an ordinary stride-1 correlation.
    """
    b, ho, wo, cout = g.shape
    k, cin = w.shape[0], w.shape[2]
    hp, wp = xp_shape[1], xp_shape[2]
    reach = d * (k - 1)
    spread = np.zeros((b, hp + reach, wp + reach, cout), dtype=g.dtype)
    spread[:, reach : reach + s * (ho - 1) + 1 : s, reach : reach + s * (wo - 1) + 1 : s, :] = g
    flipped = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(k * k * cout, cin)
    return (_im2col(spread, k, d, 1, hp, wp) @ flipped).reshape(b, hp, wp, cin)


# bilinear resampling --------------------------------------------------------


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) interpolation weights, half-pixel centres, edges clamped.

    Output index i samples input coordinate ``(i + 0.5) * n_in / n_out - 0.5``.
    """
    scale = n_in / n_out
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes (no antialiasing)."""
    if x.data.ndim != 4:
        raise ValueError(f"resize_bilinear: expected 4-D input, got {x.shape}")
    h, w = x.shape[-2:]
    rh = bilinear_matrix(h, out_h, x.dtype)
    rw = bilinear_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(rh, x.data), rw.T)

    def backward(g):
        return (np.matmul(np.matmul(rh.T, g), rw),)

    return _make(out, (x,), "resize_bilinear", backward)


def bilinear_upscale_2x(x: Tensor) -> Tensor:
    """Exact 2x bilinear upscale with the same sampling as :func:`resize_bilinear`.

    Along each axis output 2i takes 3/4 of pixel i and 1/4 of pixel i-1, and
    output 2i+1 takes 3/4 of pixel i and 1/4 of pixel i+1 (indices clamped).
    """
    if x.data.ndim != 4:
        raise ValueError(f"bilinear_upscale_2x: expected 4-D input, got {x.shape}")
    out = _upsample_axis(_upsample_axis(x.data, 2), 3)

    def backward(g):
        return (_upsample_axis_adjoint(_upsample_axis_adjoint(g, 3), 2),)

    return _make(out, (x,), "bilinear_upscale_2x", backward)


def _upsample_axis(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, 0)
    n = a.shape[0]
    prev = np.concatenate([a[:1], a[:-1]])
    nxt = np.concatenate([a[1:], a[-1:]])
    out = np.empty((2 * n,) + a.shape[1:], dtype=a.dtype)
    out[0::2] = 0.75 * a + 0.25 * prev
    out[1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, 0, axis)


def _upsample_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, 0)
    ge, go = g[0::2], g[1::2]
    gx = 0.75 * (ge + go)
    gx[:-1] += 0.25 * ge[1:]
    gx[0] += 0.25 * ge[0]
    gx[1:] += 0.25 * go[:-1]
    gx[-1] += 0.25 * go[-1]
    return np.moveaxis(gx, 0, axis)


# losses ---------------------------------------------------------------------


def weighted_l1(x: np.ndarray, f_out: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(weights * |x - f_out|) / x.size``, differentiable w.r.t. ``f_out``."""
    if x.shape != f_out.shape:
        raise ValueError(f"weighted_l1: shape mismatch {x.shape} vs {f_out.shape}")
    diff = f_out.data - x
    n = x.size
    val = np.asarray((weights * np.abs(diff)).sum(dtype=np.float64) / n, dtype=f_out.dtype)
    sign = np.sign(diff)

    def backward(g):
        return ((g / n) * weights * sign,)

    return _make(val, (f_out,), "weighted_l1", backward)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)
