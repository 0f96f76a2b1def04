"""Concordance loss, AdamW and the mixed-precision update step."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

CCC_EPS = 1e-8


class BatchSizeError(ValueError):
    pass


class LossScaleUnderflow(ArithmeticError):
    pass


def ccc(pred, label, eps: float = CCC_EPS) -> float:
    """Concordance correlation coefficient with population statistics, in float64."""
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(label, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"pred and label sizes differ: {x.size} vs {y.size}")
    if x.size < 2:
        raise BatchSizeError(f"CCC needs at least 2 samples, got {x.size}")
    mx, my = x.mean(), y.mean()
    cov = ((x - mx) * (y - my)).mean()
    denom = ((x - mx) ** 2).mean() + ((y - my) ** 2).mean() + (mx - my) ** 2 + eps
    return float(2.0 * cov / denom)


def ccc_loss(pred: Tensor, label: Tensor, eps: float = CCC_EPS) -> Tensor:
    """1 - CCC over a batch vector, differentiable through every batch statistic."""
    n = pred.shape[0]
    if n < 2:
        raise BatchSizeError(f"CCC loss needs a batch of at least 2, got {n}")
    mx = T.tmean(pred)
    my = T.tmean(label)
    dx = pred - mx
    dy = label - my
    cov = T.tmean(dx * dy)
    var_x = T.tmean(dx * dx)
    var_y = T.tmean(dy * dy)
    gap = mx - my
    value = (cov * 2.0) / (var_x + var_y + gap * gap + eps)
    return 1.0 - value


def multitask_loss(pred: Tensor, labels: Tensor, eps: float = CCC_EPS) -> Tensor:
    """Mean of the activation (column 0) and valence (column 1) CCC losses."""
    if pred.shape != labels.shape or pred.ndim != 2:
        raise ValueError(f"pred {pred.shape} and labels {labels.shape} must both be [B, 2]")
    tasks = [ccc_loss(pred[:, i], labels[:, i], eps) for i in range(pred.shape[1])]
    total = tasks[0]
    for t in tasks[1:]:
        total = total + t
    return total * (1.0 / len(tasks))


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "step")}


def adamw_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamWState
) -> tuple[dict[str, np.ndarray] | None, AdamWState]:
    """One decoupled-weight-decay Adam update.

    Returns ``(None, state)`` untouched when any gradient is non-finite.
    """
    for path, g in grads.items():
        if g.shape != params[path].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {path} {params[path].shape}")
        if not np.isfinite(g).all():
            return None, state
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    updated = {}
    for path, g in grads.items():
        theta = params[path]
        m = state.m.get(path)
        v = state.v.get(path)
        if m is None:
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        step = m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * theta
        updated[path] = (theta - state.lr * step).astype(theta.dtype, copy=False)
        state.m[path] = m.astype(theta.dtype, copy=False)
        state.v[path] = v.astype(theta.dtype, copy=False)
    return updated, state


@dataclass
class LossScaler:
    scale: float = 2.0**16
    growth_interval: int = 2000
    consecutive_clean: int = 0

    def update(self, overflow: bool) -> None:
        if overflow:
            self.scale /= 2.0
            self.consecutive_clean = 0
            if self.scale < 1.0:
                raise LossScaleUnderflow("loss scale fell below 1; gradients overflow at every scale")
            return
        self.consecutive_clean += 1
        if self.consecutive_clean >= self.growth_interval:
            self.scale *= 2.0
            self.consecutive_clean = 0


@dataclass
class StepOutcome:
    loss: float
    applied: bool
    scale: float
    overflow: bool


class Trainer:
    """Owns a model's optimizer state and applies single or mixed-precision steps.

    ``loss_fn(weights, train, rng)`` runs the forward pass with the given weight
    mapping and returns a scalar loss Tensor.
    """

    def __init__(self, model, state: AdamWState, precision: str = "single", scaler: LossScaler | None = None):
        if precision not in ("single", "mixed"):
            raise ValueError(f"precision must be 'single' or 'mixed', got {precision!r}")
        self.model = model
        self.state = state
        self.precision = precision
        self.scaler = scaler or (LossScaler() if precision == "mixed" else None)
        self.half_weights: dict[str, Tensor] = {}
        if precision == "mixed":
            self.refresh_half()

    def refresh_half(self) -> None:
        """Re-derive binary16 working copies from the 32-bit master weights."""
        self.half_weights = {
            p: Tensor(T.half_round(t.data), requires_grad=t.requires_grad) for p, t in self.model.params.items()
        }

    def step(self, loss_fn: Callable, rng=None, inject_grad: Mapping[str, np.ndarray] | None = None) -> StepOutcome:
        if self.precision == "single":
            return self._single(loss_fn, rng)
        return self._mixed(loss_fn, rng, inject_grad)

    def _apply(self, grads: dict[str, np.ndarray]) -> bool:
        masters = {p: self.model.params[p].data for p in grads}
        updated, _ = adamw_step(masters, grads, self.state)
        if updated is None:
            return False
        for p, arr in updated.items():
            self.model.params[p].data = arr
        return True

    def _single(self, loss_fn, rng) -> StepOutcome:
        model = self.model
        model.zero_grad()
        loss = loss_fn(None, True, rng)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value} in single precision")
        T.backward(loss)
        grads = {p: _grad_or_zero(model.params[p]) for p in model.trainable_paths()}
        applied = self._apply(grads)
        if not applied:
            raise FloatingPointError("non-finite gradient in single precision")
        model.zero_grad()
        return StepOutcome(value, True, 1.0, False)

    def _mixed(self, loss_fn, rng, inject_grad) -> StepOutcome:
        model, scaler = self.model, self.scaler
        for t in self.half_weights.values():
            t.grad = None
        with T.autocast_half():
            loss = loss_fn(self.half_weights, True, rng)
        value = loss.item()
        scale = scaler.scale
        grads = {}
        # half-precision overflow is expected here and detected below
        with np.errstate(over="ignore", invalid="ignore"):
            T.backward(loss * scale)
            for p in model.trainable_paths():
                g = _grad_or_zero(self.half_weights[p]).astype(np.float32)
                if inject_grad and p in inject_grad:
                    g = g + inject_grad[p]
                grads[p] = g / np.float32(scale)
        overflow = not all(np.isfinite(g).all() for g in grads.values())
        applied = False
        if not overflow:
            applied = self._apply(grads)
            overflow = not applied
        scaler.update(overflow)
        if applied:
            self.refresh_half()
        for t in self.half_weights.values():
            t.grad = None
        return StepOutcome(value, applied, scale, overflow)


def _grad_or_zero(t: Tensor) -> np.ndarray:
    return t.grad if t.grad is not None else np.zeros_like(t.data)
