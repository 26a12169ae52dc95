"""Small numpy convolutional network engine (batch size 1, CHW tensors)."""

from .ops import (
    bilinear_upsample,
    bilinear_upsample_backward,
    check_tensor,
    conv2d,
    conv2d_backward,
    maxpool,
    maxpool_backward,
    softmax,
    softmax_xent_sum,
)
from .layers import Conv2d, Dropout, LayerSpec, MaxPool, ReLU, Upsample, build_layer
from .optim import NonFiniteGradientError, OptimState, sgd_momentum_step
from .gradcheck import gradcheck, gradcheck_layer

__all__ = [
    "bilinear_upsample",
    "bilinear_upsample_backward",
    "check_tensor",
    "conv2d",
    "conv2d_backward",
    "maxpool",
    "maxpool_backward",
    "softmax",
    "softmax_xent_sum",
    "Conv2d",
    "Dropout",
    "LayerSpec",
    "MaxPool",
    "ReLU",
    "Upsample",
    "build_layer",
    "NonFiniteGradientError",
    "OptimState",
    "sgd_momentum_step",
    "gradcheck",
    "gradcheck_layer",
]
