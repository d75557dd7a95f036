"""Layers with cached forward state and explicit backward passes."""
from __future__ import annotations

from typing import Iterator, List, Optional

import numpy as np

from . import functional as F
from .functional import LayerParams


class Layer:
    """Base layer. Subclasses cache what backward needs during ``forward``."""

    params: Optional[LayerParams] = None
    training: bool = True

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def parameters(self) -> List[LayerParams]:
        return [self.params] if self.params is not None else []

    def buffers(self) -> List[np.ndarray]:
        return []

    def describe(self) -> dict:
        return {"kind": type(self).__name__}


def _gaussian(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(np.float32)


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, rng=None, std=0.02, name=""):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding, self.kernel = stride, padding, kernel
        self.in_channels, self.out_channels = in_channels, out_channels
        self.params = LayerParams(
            _gaussian(rng, (out_channels, in_channels, kernel, kernel), std),
            np.zeros(out_channels, dtype=np.float32),
            name=name,
        )
        self._x = None

    def forward(self, x):
        self._x = x
        return F.conv2d(x, self.params, self.stride, self.padding)

    def backward(self, dout):
        return F.conv2d_backward(dout, self._x, self.params, self.stride, self.padding)

    def describe(self):
        return {
            "kind": "conv2d",
            "in": self.in_channels,
            "out": self.out_channels,
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
        }


class ConvTranspose2d(Layer):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, rng=None, std=0.02, name=""):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding, self.kernel = stride, padding, kernel
        self.in_channels, self.out_channels = in_channels, out_channels
        self.params = LayerParams(
            _gaussian(rng, (in_channels, out_channels, kernel, kernel), std),
            np.zeros(out_channels, dtype=np.float32),
            name=name,
        )
        self._x = None

    def forward(self, x):
        self._x = x
        return F.transposed_conv2d(x, self.params, self.stride, self.padding)

    def backward(self, dout):
        return F.transposed_conv2d_backward(dout, self._x, self.params, self.stride, self.padding)

    def describe(self):
        return {
            "kind": "conv_transpose2d",
            "in": self.in_channels,
            "out": self.out_channels,
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
        }


class Linear(Layer):
    """Dense layer on (N, in_features) inputs; weights are (out, in)."""

    def __init__(self, in_features, out_features, rng=None, std=0.02, name=""):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.params = LayerParams(
            _gaussian(rng, (out_features, in_features), std),
            np.zeros(out_features, dtype=np.float32),
            name=name,
        )
        self._x = None

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise F.ShapeError(f"linear expects (N, {self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.params.weights.T + self.params.biases

    def backward(self, dout):
        self.params.weight_grads += (dout.T @ self._x).astype(self.params.weight_grads.dtype)
        self.params.bias_grads += dout.sum(axis=0).astype(self.params.bias_grads.dtype)
        return dout @ self.params.weights

    def describe(self):
        return {"kind": "linear", "in": self.in_features, "out": self.out_features}


class BatchNorm2d(Layer):
    """Per-channel batch normalization; eval mode uses running statistics."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, name=""):
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params = LayerParams(np.ones(channels, dtype=np.float32), np.zeros(channels, dtype=np.float32), name=name)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self._cache = None

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise F.ShapeError(f"batchnorm expects (N, {self.channels}, H, W), got {x.shape}")
        if self.training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * (m / max(m - 1, 1))
            self.running_mean[...] = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var[...] = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            mean, var = self.running_mean.astype(x.dtype), self.running_var.astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var + x.dtype.type(self.eps))
        xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        self._cache = (xhat, inv_std)
        return xhat * self.params.weights.reshape(1, -1, 1, 1) + self.params.biases.reshape(1, -1, 1, 1)

    def backward(self, dout):
        xhat, inv_std = self._cache
        gamma = self.params.weights.reshape(1, -1, 1, 1)
        self.params.weight_grads += (dout * xhat).sum(axis=(0, 2, 3)).astype(self.params.weight_grads.dtype)
        self.params.bias_grads += dout.sum(axis=(0, 2, 3)).astype(self.params.bias_grads.dtype)
        dxhat = dout * gamma
        if not self.training:
            return dxhat * inv_std.reshape(1, -1, 1, 1)
        m = dout.shape[0] * dout.shape[2] * dout.shape[3]
        mean_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True) / m
        mean_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True) / m
        return (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_std.reshape(1, -1, 1, 1)

    def buffers(self):
        return [self.running_mean, self.running_var]

    def describe(self):
        return {"kind": "batchnorm2d", "channels": self.channels}


class Activation(Layer):
    def __init__(self, kind: str, slope: float = 0.2):
        self.kind, self.slope = kind, slope
        self._x = self._y = None

    def forward(self, x):
        self._x = x
        self._y = F.activation(x, self.kind, self.slope)
        return self._y

    def backward(self, dout):
        return F.activation_backward(dout, self._x, self._y, self.kind, self.slope)

    def describe(self):
        d = {"kind": self.kind}
        if self.kind == "leaky-relu":
            d["slope"] = self.slope
        return d


def LeakyReLU(slope=0.2):
    return Activation("leaky-relu", slope)


def ReLU():
    return Activation("relu")


def Tanh():
    return Activation("tanh")


def Sigmoid():
    return Activation("sigmoid")


class MaxPool2d(Layer):
    def __init__(self, factor: int):
        self.factor = factor
        self._x = None

    def forward(self, x):
        self._x = x
        return F.maxpool(x, self.factor)

    def backward(self, dout):
        return F.maxpool_backward(dout, self._x, self.factor)

    def describe(self):
        return {"kind": "maxpool", "factor": self.factor}


class Flatten(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)

    def describe(self):
        return {"kind": "flatten"}


class Reshape(Layer):
    """Reshape each batch item to ``shape``."""

    def __init__(self, shape):
        self.shape = tuple(shape)
        self._in_shape = None

    def forward(self, x):
        self._in_shape = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, dout):
        return dout.reshape(self._in_shape)

    def describe(self):
        return {"kind": "reshape", "shape": list(self.shape)}


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self):
        return [b for layer in self.layers for b in layer.buffers()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Sequential":
        for layer in self.walk():
            layer.training = mode
        return self

    def eval(self) -> "Sequential":
        return self.train(False)

    def walk(self) -> Iterator[Layer]:
        for layer in self.layers:
            if isinstance(layer, Sequential):
                yield from layer.walk()
            else:
                yield layer

    def describe(self):
        return {"kind": "sequential", "layers": [layer.describe() for layer in self.layers]}

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]
