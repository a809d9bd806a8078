"""Parameter initialization.

The first layer of any network (the one reading raw centered pixels)
draws its weights from N(0, 0.01); every other layer uses the Xavier
uniform rule.  Biases start at exactly zero.
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument
from .layers import (
    ACT_LRELU,
    KIND_CONV,
    KIND_FC,
    KIND_MERGER,
    KIND_TCONV,
    LayerParams,
)

FIRST_LAYER_STD = 0.01


def _draw(shape, fan_in: int, fan_out: int, first_layer: bool, rng: np.random.Generator):
    if first_layer:
        return rng.normal(0.0, FIRST_LAYER_STD, size=shape)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(
    kind: str,
    *,
    rng: np.random.Generator,
    first_layer: bool = False,
    activation: str = ACT_LRELU,
    stride: int = 1,
    in_dim: int | None = None,
    out_dim: int | None = None,
    kernel: int | None = None,
    c_in: int | None = None,
    c_out: int | None = None,
    channels: int | None = None,
) -> LayerParams:
    """Build a freshly initialized layer of the given kind.

    fc needs in_dim/out_dim; conv2d and tconv2d need kernel/c_in/c_out;
    merger needs channels/in_dim/out_dim.
    """
    if kind == KIND_FC:
        if in_dim is None or out_dim is None:
            raise InvalidArgument("fc init needs in_dim and out_dim")
        w = _draw((out_dim, in_dim), in_dim, out_dim, first_layer, rng)
        b = np.zeros(out_dim)
    elif kind == KIND_CONV:
        if kernel is None or c_in is None or c_out is None:
            raise InvalidArgument("conv init needs kernel, c_in, c_out")
        fan = kernel * kernel
        w = _draw((kernel, kernel, c_in, c_out), fan * c_in, fan * c_out, first_layer, rng)
        b = np.zeros(c_out)
    elif kind == KIND_TCONV:
        if kernel is None or c_in is None or c_out is None:
            raise InvalidArgument("tconv init needs kernel, c_in, c_out")
        fan = kernel * kernel
        w = _draw((kernel, kernel, c_out, c_in), fan * c_in, fan * c_out, first_layer, rng)
        b = np.zeros(c_out)
    elif kind == KIND_MERGER:
        if channels is None or in_dim is None or out_dim is None:
            raise InvalidArgument("merger init needs channels, in_dim, out_dim")
        w = _draw((channels, out_dim, in_dim), in_dim, out_dim, first_layer, rng)
        b = np.zeros((channels, out_dim))
    else:
        raise InvalidArgument(f"unknown layer kind {kind!r}")
    return LayerParams(kind=kind, weights=w, biases=b, stride=stride, activation=activation)
