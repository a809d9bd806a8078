"""Deterministic tensor/NN math core: layers, losses, optimizer, init."""

from .adam import AdamState, adam_step
from .gradcheck import max_relative_error, numerical_gradient
from .init import init_params
from .layers import (
    ACT_LRELU,
    ACT_NONE,
    KIND_CONV,
    KIND_FC,
    KIND_MERGER,
    KIND_TCONV,
    LEAKY_SLOPE,
    LayerParams,
    backward,
    conv2d_backward,
    conv2d_forward,
    fc_backward,
    fc_forward,
    forward,
    merger_backward,
    merger_forward,
    tconv2d_backward,
    tconv2d_forward,
)
from .loss import (
    DISTORTION_L1,
    DISTORTION_L2,
    distortion_and_grad,
    loss_and_grad,
    weight_penalty,
)

__all__ = [
    "AdamState",
    "adam_step",
    "max_relative_error",
    "numerical_gradient",
    "init_params",
    "ACT_LRELU",
    "ACT_NONE",
    "KIND_CONV",
    "KIND_FC",
    "KIND_MERGER",
    "KIND_TCONV",
    "LEAKY_SLOPE",
    "LayerParams",
    "backward",
    "conv2d_backward",
    "conv2d_forward",
    "fc_backward",
    "fc_forward",
    "forward",
    "merger_backward",
    "merger_forward",
    "tconv2d_backward",
    "tconv2d_forward",
    "DISTORTION_L1",
    "DISTORTION_L2",
    "distortion_and_grad",
    "loss_and_grad",
    "weight_penalty",
]
