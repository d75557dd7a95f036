"""Stateless tensor operations on NCHW numpy arrays.

Tensors are plain ``numpy.ndarray`` objects (float32 by default). Every
operation works in the dtype of its inputs so that gradient checks can run
the same code in float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


@dataclass
class LayerParams:
    """Weights and biases of one layer plus their accumulated gradients."""

    weights: np.ndarray
    biases: np.ndarray
    weight_grads: np.ndarray = None
    bias_grads: np.ndarray = None
    name: str = ""

    def __post_init__(self):
        if self.weight_grads is None:
            self.weight_grads = np.zeros_like(self.weights)
        if self.bias_grads is None:
            self.bias_grads = np.zeros_like(self.biases)
        if self.weight_grads.shape != self.weights.shape:
            raise ShapeError(f"{self.name}: weight_grads shape {self.weight_grads.shape} != {self.weights.shape}")
        if self.bias_grads.shape != self.biases.shape:
            raise ShapeError(f"{self.name}: bias_grads shape {self.bias_grads.shape} != {self.biases.shape}")

    def zero_grad(self) -> None:
        self.weight_grads[...] = 0
        self.bias_grads[...] = 0

    def arrays(self):
        return [self.weights, self.biases]


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    """Validate ``x`` as a tensor of order 1..4 with positive extents."""
    arr = np.asarray(x, dtype=dtype)
    if not 1 <= arr.ndim <= 4:
        raise ShapeError(f"tensor order must be 1..4, got shape {arr.shape}")
    if any(e < 1 for e in arr.shape):
        raise ShapeError(f"tensor extents must be >= 1, got shape {arr.shape}")
    return arr


def _check_4d(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects a 4-D NCHW tensor, got shape {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def transposed_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def _windows(xp: np.ndarray, kernel: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    # (N, C, Ho, Wo, k, k) view over the padded input
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    return win[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _scatter_taps(cols: np.ndarray, out_h: int, out_w: int, stride: int, padding: int) -> np.ndarray:
    """Sum (N, H, W, C, k, k) tap contributions into an (N, C, out_h, out_w) map.

    The inverse of ``_windows``: tap (i, j) of input cell (h, w) lands at
    ``(h*stride + i - padding, w*stride + j - padding)``.
    """
    n, h, w, c, k, _ = cols.shape
    full_h = (h - 1) * stride + k
    full_w = (w - 1) * stride + k
    full = np.zeros((n, c, max(full_h, out_h + padding), max(full_w, out_w + padding)), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            full[:, :, i : i + (h - 1) * stride + 1 : stride, j : j + (w - 1) * stride + 1 : stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return full[:, :, padding : padding + out_h, padding : padding + out_w]


def conv2d(x: np.ndarray, params: LayerParams, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation with weights of shape (out, in, k, k)."""
    _check_4d(x, "conv2d")
    w = params.weights
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d weights must be (out, in, k, k), got {w.shape}")
    out_c, in_c, k, _ = w.shape
    if x.shape[1] != in_c:
        raise ShapeError(f"conv2d input has {x.shape[1]} channels, weights expect {in_c}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    h, wd = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if k > h or k > wd:
        raise ShapeError(f"conv2d kernel {k} exceeds padded input {h}x{wd}")
    out_h = conv_output_size(x.shape[2], k, stride, padding)
    out_w = conv_output_size(x.shape[3], k, stride, padding)
    win = _windows(_pad(x, padding), k, stride, out_h, out_w)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, out)
    out = out + params.biases
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(dout: np.ndarray, x: np.ndarray, params: LayerParams, stride: int, padding: int) -> np.ndarray:
    """Accumulate weight/bias gradients into ``params`` and return d(input)."""
    k = params.weights.shape[2]
    out_h, out_w = dout.shape[2], dout.shape[3]
    win = _windows(_pad(x, padding), k, stride, out_h, out_w)
    params.weight_grads += np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3])).astype(params.weight_grads.dtype)
    params.bias_grads += dout.sum(axis=(0, 2, 3)).astype(params.bias_grads.dtype)
    cols = np.tensordot(dout, params.weights, axes=([1], [0]))  # (N, Ho, Wo, in, k, k)
    return _scatter_taps(cols, x.shape[2], x.shape[3], stride, padding)


def transposed_conv2d(x: np.ndarray, params: LayerParams, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Transposed convolution with weights of shape (in, out, k, k).

    With zero bias this is the exact adjoint of :func:`conv2d` using the same
    weight array, stride and padding.
    """
    _check_4d(x, "transposed_conv2d")
    w = params.weights
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"transposed_conv2d weights must be (in, out, k, k), got {w.shape}")
    in_c, out_c, k, _ = w.shape
    if x.shape[1] != in_c:
        raise ShapeError(f"transposed_conv2d input has {x.shape[1]} channels, weights expect {in_c}")
    out_h = transposed_output_size(x.shape[2], k, stride, padding)
    out_w = transposed_output_size(x.shape[3], k, stride, padding)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"transposed_conv2d output would be {out_h}x{out_w}")
    cols = np.tensordot(x, w, axes=([1], [0]))  # (N, H, W, out, k, k)
    out = _scatter_taps(cols, out_h, out_w, stride, padding)
    return out + params.biases.reshape(1, -1, 1, 1)


def transposed_conv2d_backward(
    dout: np.ndarray, x: np.ndarray, params: LayerParams, stride: int, padding: int
) -> np.ndarray:
    k = params.weights.shape[2]
    h, w = x.shape[2], x.shape[3]
    win = _windows(_pad(dout, padding), k, stride, h, w)  # (N, out, H, W, k, k)
    params.weight_grads += np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3])).astype(params.weight_grads.dtype)
    params.bias_grads += dout.sum(axis=(0, 2, 3)).astype(params.bias_grads.dtype)
    dx = np.tensordot(win, params.weights, axes=([1, 4, 5], [1, 2, 3]))  # (N, H, W, in)
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x: np.ndarray, kind: str, slope: float = 0.2) -> np.ndarray:
    """Elementwise ``leaky-relu``, ``relu``, ``tanh`` or ``sigmoid``."""
    if kind == "leaky-relu":
        return np.where(x > 0, x, x * x.dtype.type(slope))
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(dout: np.ndarray, x: np.ndarray, y: np.ndarray, kind: str, slope: float = 0.2) -> np.ndarray:
    if kind == "leaky-relu":
        return np.where(x > 0, dout, dout * dout.dtype.type(slope))
    if kind == "relu":
        return np.where(x > 0, dout, 0).astype(dout.dtype)
    if kind == "tanh":
        return dout * (1 - y * y)
    if kind == "sigmoid":
        return dout * y * (1 - y)
    raise ValueError(f"unknown activation {kind!r}")


def maxpool(x: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping ``factor`` x ``factor`` max reduction."""
    _check_4d(x, "maxpool")
    n, c, h, w = x.shape
    if factor < 1 or h % factor or w % factor:
        raise ShapeError(f"maxpool factor {factor} does not divide spatial extent {h}x{w}")
    return x.reshape(n, c, h // factor, factor, w // factor, factor).max(axis=(3, 5))


def maxpool_backward(dout: np.ndarray, x: np.ndarray, factor: int) -> np.ndarray:
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // factor, factor, w // factor, factor).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // factor, w // factor, factor * factor)
    # gradient goes to the first maximum of each block
    idx = flat.argmax(axis=-1)
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, idx[..., None], 1, axis=-1)
    grad = mask * dout[..., None]
    grad = grad.reshape(n, c, h // factor, w // factor, factor, factor).transpose(0, 1, 2, 4, 3, 5)
    return grad.reshape(n, c, h, w)


def concat_flatten(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate along channels, then flatten each batch item row-major."""
    if not maps:
        raise ShapeError("concat_flatten needs at least one map")
    for m in maps:
        _check_4d(m, "concat_flatten")
    n, _, h, w = maps[0].shape
    for m in maps[1:]:
        if m.shape[0] != n or m.shape[2:] != (h, w):
            raise ShapeError(
                f"concat_flatten maps disagree on batch/spatial extents: {[tuple(m.shape) for m in maps]}"
            )
    return np.concatenate(maps, axis=1).reshape(n, -1)
