"""SGD-with-momentum and Adam updates over lists of :class:`LayerParams`."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .functional import LayerParams


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 2e-4
    momentum: float = 0.5  # beta1 for adam
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8
    step_count: int = 0
    # per parameter array: first moment (velocity for sgd), second moment (adam only)
    first_moments: List[np.ndarray] = field(default_factory=list)
    second_moments: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd-momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("momentum/beta1 and beta2 must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


def sgd(learning_rate=0.01, momentum=0.0, weight_decay=0.0) -> OptimizerState:
    return OptimizerState("sgd-momentum", learning_rate, momentum, 0.0, weight_decay)


def adam(learning_rate=2e-4, beta1=0.5, beta2=0.999, weight_decay=0.0) -> OptimizerState:
    return OptimizerState("adam", learning_rate, beta1, beta2, weight_decay)


def _pairs(params: Sequence[LayerParams]):
    for i, p in enumerate(params):
        label = p.name or f"param[{i}]"
        yield f"{label}.weights", p.weights, p.weight_grads
        yield f"{label}.biases", p.biases, p.bias_grads


def optimizer_step(params: Sequence[LayerParams], state: OptimizerState) -> OptimizerState:
    """Update ``params`` in place. Gradients are left for the caller to zero."""
    pairs = list(_pairs(params))
    for ident, _, g in pairs:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {ident}")
    if not state.first_moments:
        state.first_moments = [np.zeros_like(w) for _, w, _ in pairs]
        if state.kind == "adam":
            state.second_moments = [np.zeros_like(w) for _, w, _ in pairs]
    if len(state.first_moments) != len(pairs):
        raise ValueError("optimizer state does not match the parameter set")

    state.step_count += 1
    t = state.step_count
    lr = state.learning_rate
    for k, (ident, w, g) in enumerate(pairs):
        m = state.first_moments[k]
        if m.shape != w.shape:
            raise ValueError(f"moment buffer for {ident} has shape {m.shape}, expected {w.shape}")
        grad = g + state.weight_decay * w if state.weight_decay else g
        if state.kind == "sgd-momentum":
            m *= state.momentum
            m += grad
            w -= (lr * m).astype(w.dtype)
        else:
            v = state.second_moments[k]
            b1, b2 = state.momentum, state.beta2
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            w -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(w.dtype)
    return state
