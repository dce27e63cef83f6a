"""Categorical cross-entropy loss and the Adam optimizer.

Adam follows the canonical update: decaying first/second raw moment
estimates with bias correction and the epsilon outside the square root.
The softmax+cross-entropy pair is fused for training (gradient at the
logits is simply probs - target); the standalone ops remain for
inference and tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatchError, NotOneHotError, ShapeMismatchError
from .layers import softmax
from .tensor import Tensor

PROB_FLOOR = 1e-12  # clamp inside the log so a confident miss stays finite


@dataclass(frozen=True)
class AdamHyper:
    """Optimizer constants; defaults are the canonical ones."""

    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if not (0.0 <= self.beta1 < 1.0) or not (0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


@dataclass(frozen=True)
class AdamState:
    """Per-parameter moment accumulators and step counter."""

    m: Tensor
    v: Tensor
    t: int = 0

    @classmethod
    def initial(cls, param: Tensor) -> "AdamState":
        zeros = np.zeros(param.dims)
        return cls(Tensor(zeros), Tensor(zeros), 0)


def _check_one_hot(target: np.ndarray):
    if not np.all((target == 0.0) | (target == 1.0)) or target.sum() != 1.0:
        raise NotOneHotError(f"target must be one-hot, got {target.tolist()}")


def cross_entropy(pred: Tensor, target: Tensor) -> float:
    """-sum(target_i * ln(pred_i)) with pred clamped to [1e-12, 1]."""
    p, t = pred.array, target.array
    if p.shape != t.shape or p.ndim != 1:
        raise LengthMismatchError(f"pred {p.shape} vs target {t.shape}")
    _check_one_hot(t)
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise ValueError(f"pred must sum to 1, got {float(p.sum())}")
    clamped = np.clip(p, PROB_FLOOR, 1.0)
    return float(-(t * np.log(clamped)).sum())


def softmax_cross_entropy(logits: Tensor, target: Tensor) -> tuple[float, Tensor]:
    """Fused loss and gradient w.r.t. the logits: (loss, probs - target)."""
    if logits.dims != target.dims or logits.shape.rank != 1:
        raise LengthMismatchError(f"logits {logits.dims} vs target {target.dims}")
    _check_one_hot(target.array)
    probs = softmax(logits)
    loss = cross_entropy(probs, target)
    grad = probs.array - target.array
    return loss, Tensor(grad, dtype=grad.dtype)


def adam_step(params: Tensor, grads: Tensor, state: AdamState,
              hyper: AdamHyper) -> tuple[Tensor, AdamState]:
    """One Adam update; returns the new parameters and advanced state."""
    if params.dims != grads.dims:
        raise ShapeMismatchError(f"params {params.dims} vs grads {grads.dims}")
    if state.m.dims != params.dims or state.v.dims != params.dims:
        raise ShapeMismatchError("optimizer state does not match the parameter")
    g = grads.array
    t = state.t + 1
    m = hyper.beta1 * state.m.array + (1.0 - hyper.beta1) * g
    v = hyper.beta2 * state.v.array + (1.0 - hyper.beta2) * (g * g)
    m_hat = m / (1.0 - hyper.beta1 ** t)
    v_hat = v / (1.0 - hyper.beta2 ** t)
    new_params = params.array - hyper.alpha * m_hat / (np.sqrt(v_hat) + hyper.epsilon)
    return Tensor(new_params), AdamState(Tensor(m), Tensor(v), t)
