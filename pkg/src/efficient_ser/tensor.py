"""Dense tensors with reverse-mode differentiation and emulated binary16.

Every op takes and returns :class:`Tensor`.  A node is recorded only when
gradient tracking is enabled and at least one input requires a gradient, so
frozen sub-networks run as plain numpy without building a graph.

Half precision is emulated: inside :func:`autocast_half` every op output (and
every gradient flowing back through such an op) is rounded onto the binary16
grid while storage and accumulation stay 32-bit.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from collections import Counter
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

HALF_MAX = 65504.0
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

OP_COUNTS: Counter = Counter()
"""Invocation counts per op kind; reset with ``OP_COUNTS.clear()``."""

_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)
_half_mode = contextvars.ContextVar("half_mode", default=False)


class ShapeError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def autocast_half(enabled: bool = True) -> Iterator[None]:
    """Round op outputs and their gradients to binary16 inside the block.

    ``autocast_half(False)`` restores full precision for a nested region.
    """
    token = _half_mode.set(enabled)
    try:
        yield
    finally:
        _half_mode.reset(token)


def half_active() -> bool:
    return _half_mode.get()


def half_round(values: np.ndarray) -> np.ndarray:
    """Round to nearest binary16 (ties to even), returned in the input dtype.

    Magnitudes beyond the largest finite half become ``inf``.
    """
    values = np.asarray(values)
    dtype = values.dtype if values.dtype in (np.float32, np.float64) else np.float32
    with np.errstate(over="ignore"):
        return values.astype(np.float16).astype(dtype)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based Philox generator keyed by ``(seed, *stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_half", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._half = False
        self.op = "leaf"

    # basic properties
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def _wrap(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(value, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    half = _half_mode.get()
    if half:
        data = half_round(data)
    out = Tensor(data)
    OP_COUNTS[op] += 1
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._half = half
        out.op = op
    else:
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if grad is None:
        if loss.data.size != 1:
            raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = _unbroadcast(np.asarray(pg), parent.shape).astype(parent.dtype, copy=False)
            if node._half:
                pg = half_round(pg)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a if isinstance(a, Tensor) else None)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a)
    ad, bd = a.data, b.data
    return _result(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)), "div")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return _result(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def _bw(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return _result(xd * cdf, (x,), _bw, "gelu")


# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), _bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    count = a.data.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _result(a.data.mean(axis=axis, keepdims=keepdims), (a,), _bw, "mean")


def mean_over_time(x: Tensor) -> Tensor:
    """Average over the time axis (second to last); every frame counts, padding included."""
    if x.ndim < 2 or x.shape[-2] == 0:
        raise ShapeError(f"mean_over_time needs at least one frame, got shape {x.shape}")
    frames = x.shape[-2]
    shape = x.shape
    return _result(
        x.data.mean(axis=-2),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, -2) / frames, shape),),
        "mean_over_time",
    )


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int)) or i is Ellipsis for i in parts)

    def _bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), _bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


def pad_time(x: Tensor, length: int) -> Tensor:
    """Zero-pad axis -2 of ``x`` at the end up to ``length`` frames."""
    frames = x.shape[-2]
    if frames == length:
        return x
    widths = [(0, 0)] * x.ndim
    widths[-2] = (0, length - frames)
    return _result(np.pad(x.data, widths), (x,), lambda g: (g[..., :frames, :],), "pad_time")


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _bw(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _result(ad @ bd, (a, b), _bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = [
            g @ wd if x.requires_grad else None,
            g2.T @ xd.reshape(-1, xd.shape[-1]) if weight.requires_grad else None,
        ]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return grads

    return _result(out, parents, _bw, "linear")


def softmax(x: Tensor) -> Tensor:
    xd = x.data
    shifted = np.exp(xd - xd.max(axis=-1, keepdims=True))
    out = shifted / shifted.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), _bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis by its population mean and variance, then scale and shift."""
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm over an empty last dimension")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def _bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _result(out.astype(xd.dtype, copy=False), (x, gamma, beta), _bw, "layer_norm")


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    groups: int = 1,
    padding: int = 0,
) -> Tensor:
    """Grouped 1-D cross-correlation.

    ``x`` is ``[C_in, T]`` or ``[B, C_in, T]``; ``weight`` is ``[C_out, C_in/groups, K]``.
    """
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    batch, c_in, length = xd.shape
    c_out, c_group, kernel = weight.shape
    if c_in % groups or c_out % groups or c_in // groups != c_group:
        raise ShapeError(f"conv1d channels: input {x.shape}, weight {weight.shape}, groups={groups}")
    out_len = (length + 2 * padding - kernel) // stride + 1
    if out_len < 1:
        raise ShapeError(
            f"conv1d input too short: length {length} with kernel {kernel}, stride {stride}, padding {padding}"
        )
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    o_group = c_out // groups
    windows = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=2)[:, :, : (out_len - 1) * stride + 1 : stride]
    # cols: [B, g, T', Cg*K]
    cols = windows.reshape(batch, groups, c_group, out_len, kernel).transpose(0, 1, 3, 2, 4)
    cols = cols.reshape(batch, groups, out_len, c_group * kernel)
    wmat = weight.data.reshape(groups, o_group, c_group * kernel).transpose(0, 2, 1)
    out = cols @ wmat  # [B, g, T', Og]
    out = out.transpose(0, 1, 3, 2).reshape(batch, c_out, out_len)
    if bias is not None:
        out = out + bias.data[:, None]
    if squeeze:
        out = out[0]
    parents = (x, weight) if bias is None else (x, weight, bias)
    padded_len = xp.shape[2]

    def _bw(g):
        g3 = g[None] if squeeze else g
        gg = g3.reshape(batch, groups, o_group, out_len).transpose(0, 1, 3, 2)  # [B, g, T', Og]
        gw = None
        if weight.requires_grad:
            gw = np.einsum("bgtc,bgto->goc", cols, gg).reshape(c_out, c_group, kernel)
        gx = None
        if x.requires_grad:
            gcols = gg @ wmat.transpose(0, 2, 1)  # [B, g, T', Cg*K]
            gcols = gcols.reshape(batch, groups, out_len, c_group, kernel).transpose(0, 1, 3, 2, 4)
            gcols = gcols.reshape(batch, c_in, out_len, kernel)
            gxp = np.zeros((batch, c_in, padded_len), dtype=xd.dtype)
            stop = (out_len - 1) * stride + 1
            for k in range(kernel):
                gxp[:, :, k : k + stop : stride] += gcols[..., k]
            gx = gxp[:, :, padding : padding + length] if padding else gxp
            if squeeze:
                gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 2)) if bias.requires_grad else None)
        return grads

    return _result(out.astype(xd.dtype, copy=False), parents, _bw, "conv1d")


def conv_output_length(length: int, kernel: int, stride: int, padding: int = 0) -> int:
    return (length + 2 * padding - kernel) // stride + 1


# stochastic and precision ops


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors scale by 1/(1-p); identity in eval mode or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng stream")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def to_half(x: Tensor) -> Tensor:
    """Round onto the binary16 grid; the straight-through gradient is rounded too."""
    return _result(half_round(x.data), (x,), lambda g: (half_round(g),), "to_half")


def has_overflow(x: Tensor | np.ndarray) -> bool:
    data = x.data if isinstance(x, Tensor) else x
    return not bool(np.isfinite(data).all())
