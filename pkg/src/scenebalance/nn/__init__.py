from .functional import (
    LayerParams,
    ShapeError,
    activation,
    as_tensor,
    concat_flatten,
    conv2d,
    maxpool,
    transposed_conv2d,
)
from .gradcheck import gradient_check, squared_loss, weighted_sum_loss
from .layers import (
    Activation,
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Flatten,
    Layer,
    LeakyReLU,
    Linear,
    MaxPool2d,
    ReLU,
    Reshape,
    Sequential,
    Sigmoid,
    Tanh,
)
from .optim import OptimizerState, adam, optimizer_step, sgd

__all__ = [
    "Activation",
    "BatchNorm2d",
    "Conv2d",
    "ConvTranspose2d",
    "Flatten",
    "Layer",
    "LayerParams",
    "LeakyReLU",
    "Linear",
    "MaxPool2d",
    "OptimizerState",
    "ReLU",
    "Reshape",
    "Sequential",
    "ShapeError",
    "Sigmoid",
    "Tanh",
    "activation",
    "adam",
    "as_tensor",
    "concat_flatten",
    "conv2d",
    "gradient_check",
    "maxpool",
    "optimizer_step",
    "sgd",
    "squared_loss",
    "transposed_conv2d",
    "weighted_sum_loss",
]
