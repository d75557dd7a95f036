"""Central-difference gradient checking for layer stacks."""
from __future__ import annotations

import copy
from typing import Callable, Optional, Tuple

import numpy as np

from .layers import BatchNorm2d, Layer

LossFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]

MAX_PARAMETERS = 10_000


def squared_loss(target: Optional[np.ndarray] = None) -> LossFn:
    """0.5 * sum((out - target)^2) and its gradient."""

    def loss(out):
        diff = out - (0 if target is None else target)
        return 0.5 * float(np.sum(diff * diff)), diff

    return loss


def weighted_sum_loss(weights: np.ndarray) -> LossFn:
    """sum(out * weights); a linear probe that avoids symmetric zero gradients."""

    def loss(out):
        return float(np.sum(out * weights)), np.broadcast_to(weights, out.shape).astype(out.dtype)

    return loss


def _to_float64(network: Layer) -> Layer:
    net = copy.deepcopy(network)
    for p in net.parameters():
        p.weights = p.weights.astype(np.float64)
        p.biases = p.biases.astype(np.float64)
        p.weight_grads = np.zeros_like(p.weights)
        p.bias_grads = np.zeros_like(p.biases)
    layers = net.walk() if hasattr(net, "walk") else [net]
    for layer in layers:
        if isinstance(layer, BatchNorm2d):
            layer.running_mean = layer.running_mean.astype(np.float64)
            layer.running_var = layer.running_var.astype(np.float64)
    return net


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def gradient_check(
    network: Layer,
    x: np.ndarray,
    loss: LossFn,
    epsilon: float = 1e-3,
    samples_per_array: int = 40,
    check_input: bool = True,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central-difference gradients.

    Runs on a float64 copy of ``network``; the original is not touched.
    Up to ``samples_per_array`` entries of every parameter array (and of the
    input when ``check_input``) are probed.
    """
    net = _to_float64(network)
    n_params = sum(p.weights.size + p.biases.size for p in net.parameters())
    if n_params >= MAX_PARAMETERS:
        raise ValueError(f"network has {n_params} parameters; gradient_check supports < {MAX_PARAMETERS}")
    x = np.array(x, dtype=np.float64)
    rng = np.random.default_rng(seed)

    def evaluate() -> float:
        value, _ = loss(net.forward(x))
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value} during gradient check")
        return value

    for p in net.parameters():
        p.zero_grad()
    out = net.forward(x)
    value, grad = loss(out)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value} during gradient check")
    dx = net.backward(np.asarray(grad, dtype=np.float64))

    probes = []
    for p in net.parameters():
        probes.append((p.weights, p.weight_grads.copy()))
        probes.append((p.biases, p.bias_grads.copy()))
    if check_input:
        probes.append((x, dx))

    worst = 0.0
    for arr, analytic in probes:
        flat = arr.reshape(-1)
        count = min(samples_per_array, flat.size)
        idx = rng.choice(flat.size, size=count, replace=False) if count < flat.size else np.arange(flat.size)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            plus = evaluate()
            flat[i] = orig - epsilon
            minus = evaluate()
            flat[i] = orig
            numeric = (plus - minus) / (2 * epsilon)
            worst = max(worst, _rel_error(float(analytic.reshape(-1)[i]), numeric))
    return worst
