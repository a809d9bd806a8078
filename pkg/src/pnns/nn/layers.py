"""Layer forward/backward math for the four layer kinds used by the predictors.

All compute is float64.  Convolutions use "same-style" zero padding: a
stride-s layer with a k-wide kernel pads k-s pixels in total per axis,
split ceil/floor between the leading (top/left) and trailing edges, so
spatial size n maps to n/s.  Transposed convolutions are the exact
adjoint of that map and take n to n*s.

Weight layouts:
  fc      (out, in)
  conv2d  (k, k, c_in, c_out)
  tconv2d (k, k, c_out, c_in)   # the kernel of the conv this op is adjoint to
  merger  (l, out_dim, in_dim)  # one affine map per channel, channels never mix
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ..errors import InvalidArgument

LEAKY_SLOPE = 0.1

KIND_FC = "fc"
KIND_CONV = "conv2d"
KIND_TCONV = "tconv2d"
KIND_MERGER = "merger"

ACT_LRELU = "leaky_relu"
ACT_NONE = "none"


@dataclass
class LayerParams:
    """Weights and biases of one layer, plus its activation and stride."""

    kind: str
    weights: np.ndarray
    biases: np.ndarray
    stride: int = 1
    activation: str = ACT_LRELU

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.kind in (KIND_CONV, KIND_TCONV):
            k0, k1 = self.weights.shape[:2]
            if k0 != k1:
                raise InvalidArgument("conv kernels must be square")
        n_out = {
            KIND_FC: lambda: self.weights.shape[0],
            KIND_CONV: lambda: self.weights.shape[3],
            KIND_TCONV: lambda: self.weights.shape[2],
            KIND_MERGER: lambda: None,  # biases are (l, out_dim)
        }[self.kind]()
        if n_out is not None and self.biases.shape != (n_out,):
            raise InvalidArgument(
                f"bias shape {self.biases.shape} does not match output count {n_out}"
            )


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == ACT_NONE:
        return pre
    return np.where(pre >= 0.0, pre, LEAKY_SLOPE * pre)


def _activate_grad(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == ACT_NONE:
        return np.ones_like(pre)
    # the tie at exactly 0 takes the positive branch (slope 1)
    return np.where(pre >= 0.0, 1.0, LEAKY_SLOPE)


def _pads(kernel: int, stride: int) -> tuple[int, int]:
    if kernel < stride:
        raise InvalidArgument(f"kernel {kernel} smaller than stride {stride}")
    total = kernel - stride
    return (total + 1) // 2, total // 2


def _as_batch(x: np.ndarray, sample_ndim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == sample_ndim:
        return x[None], True
    if x.ndim == sample_ndim + 1:
        return x, False
    raise InvalidArgument(f"expected rank {sample_ndim} or {sample_ndim + 1} input")


# ---------------------------------------------------------------------------
# fully-connected


class FcCache(NamedTuple):
    x: np.ndarray
    pre: np.ndarray
    params: LayerParams
    squeeze: bool


def fc_forward(x: np.ndarray, params: LayerParams, *, with_cache: bool = False):
    """out = activation(W x + b) for a rank-1 input or a (batch, in) stack."""
    xb, squeeze = _as_batch(x, 1)
    w, b = params.weights, params.biases
    if xb.shape[1] != w.shape[1]:
        raise InvalidArgument(f"input length {xb.shape[1]} != weight input dim {w.shape[1]}")
    pre = xb @ w.T + b
    out = _activate(pre, params.activation)
    if squeeze:
        out = out[0]
    if with_cache:
        return out, FcCache(xb, pre, params, squeeze)
    return out


def fc_backward(dout: np.ndarray, cache: FcCache):
    da = np.asarray(dout, dtype=np.float64)
    if cache.squeeze:
        da = da[None]
    da = da * _activate_grad(cache.pre, cache.params.activation)
    dx = da @ cache.params.weights
    dw = da.T @ cache.x
    db = da.sum(axis=0)
    if cache.squeeze:
        dx = dx[0]
    return dx, dw, db


# ---------------------------------------------------------------------------
# convolution core (shared by conv2d and tconv2d)


def _pad_input(x: np.ndarray, k: int, s: int) -> np.ndarray:
    p0, p1 = _pads(k, s)
    if p0 == 0 and p1 == 0:
        return x
    return np.pad(x, ((0, 0), (p0, p1), (p0, p1), (0, 0)))


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """View the padded (B, Hp, Wp, C) input as (B*ho*wo, k*k*C) patches."""
    b, _, _, c = xp.shape
    sb, sh, sw, sc = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, ho, wo, k, k, c),
        strides=(sb, sh * s, sw * s, sh, sw, sc),
        writeable=False,
    )
    return windows.reshape(b * ho * wo, k * k * c)


def _conv_core(x: np.ndarray, w: np.ndarray, s: int) -> np.ndarray:
    """Plain strided cross-correlation, no bias or activation."""
    b, h, wd, cin = x.shape
    k = w.shape[0]
    if h % s or wd % s:
        raise InvalidArgument(f"spatial size {(h, wd)} not divisible by stride {s}")
    ho, wo = h // s, wd // s
    xp = _pad_input(x, k, s)
    cols = _im2col(xp, k, s, ho, wo)
    out = cols @ w.reshape(k * k * cin, -1)
    return out.reshape(b, ho, wo, -1)


def _conv_core_adjoint(dy: np.ndarray, w: np.ndarray, s: int) -> np.ndarray:
    """Adjoint of :func:`_conv_core` in its input argument.

    Maps (B, ho, wo, c_out) back to (B, ho*s, wo*s, c_in) by scattering
    each output position through the kernel support.
    """
    b, ho, wo, _ = dy.shape
    k = w.shape[0]
    cin = w.shape[2]
    h, wd = ho * s, wo * s
    p0, p1 = _pads(k, s)
    xp = np.zeros((b, h + p0 + p1, wd + p0 + p1, cin))
    for ky in range(k):
        for kx in range(k):
            contrib = dy @ w[ky, kx].T  # (B, ho, wo, cin)
            xp[:, ky : ky + h : s, kx : kx + wd : s, :] += contrib
    if p0 or p1:
        return xp[:, p0 : p0 + h, p0 : p0 + wd, :]
    return xp


def _conv_core_grad_w(x: np.ndarray, dy: np.ndarray, kshape: tuple, s: int) -> np.ndarray:
    """Gradient of the cross-correlation with respect to the kernel."""
    b, ho, wo, cout = dy.shape
    k, _, cin, _ = kshape
    xp = _pad_input(x, k, s)
    cols = _im2col(xp, k, s, ho, wo)
    dw = cols.T @ dy.reshape(b * ho * wo, cout)
    return dw.reshape(k, k, cin, cout)


class ConvCache(NamedTuple):
    x: np.ndarray
    pre: np.ndarray
    params: LayerParams
    squeeze: bool


def conv2d_forward(x: np.ndarray, params: LayerParams, *, with_cache: bool = False):
    """Strided same-style convolution: (H, W, C) -> (H/s, W/s, c_out)."""
    xb, squeeze = _as_batch(x, 3)
    if xb.shape[3] != params.weights.shape[2]:
        raise InvalidArgument(
            f"input channels {xb.shape[3]} != kernel channels {params.weights.shape[2]}"
        )
    pre = _conv_core(xb, params.weights, params.stride) + params.biases
    out = _activate(pre, params.activation)
    if squeeze:
        out = out[0]
    if with_cache:
        return out, ConvCache(xb, pre, params, squeeze)
    return out


def conv2d_backward(dout: np.ndarray, cache: ConvCache):
    da = np.asarray(dout, dtype=np.float64)
    if cache.squeeze:
        da = da[None]
    da = da * _activate_grad(cache.pre, cache.params.activation)
    p = cache.params
    dx = _conv_core_adjoint(da, p.weights, p.stride)
    dw = _conv_core_grad_w(cache.x, da, p.weights.shape, p.stride)
    db = da.sum(axis=(0, 1, 2))
    if cache.squeeze:
        dx = dx[0]
    return dx, dw, db


class TconvCache(NamedTuple):
    x: np.ndarray
    pre: np.ndarray
    params: LayerParams
    squeeze: bool


def tconv2d_forward(x: np.ndarray, params: LayerParams, *, with_cache: bool = False):
    """Transposed (fractionally strided) convolution: (h, w, c) -> (h*s, w*s, c_out).

    With zero biases this is the exact adjoint of :func:`conv2d_forward`
    run with the same kernel tensor and stride.
    """
    xb, squeeze = _as_batch(x, 3)
    if xb.shape[3] != params.weights.shape[3]:
        raise InvalidArgument(
            f"input channels {xb.shape[3]} != kernel channels {params.weights.shape[3]}"
        )
    pre = _conv_core_adjoint(xb, params.weights, params.stride) + params.biases
    out = _activate(pre, params.activation)
    if squeeze:
        out = out[0]
    if with_cache:
        return out, TconvCache(xb, pre, params, squeeze)
    return out


def tconv2d_backward(dout: np.ndarray, cache: TconvCache):
    da = np.asarray(dout, dtype=np.float64)
    if cache.squeeze:
        da = da[None]
    da = da * _activate_grad(cache.pre, cache.params.activation)
    p = cache.params
    dx = _conv_core(da, p.weights, p.stride)
    dw = _conv_core_grad_w(da, cache.x, p.weights.shape, p.stride)
    db = da.sum(axis=(0, 1, 2))
    if cache.squeeze:
        dx = dx[0]
    return dx, dw, db


# ---------------------------------------------------------------------------
# channelwise affine merger


class MergerCache(NamedTuple):
    flat: np.ndarray  # (B, l, in_dim)
    pre: np.ndarray  # (B, l, out_dim)
    shapes: tuple
    params: LayerParams
    squeeze: bool


def _merger_flatten(z0: np.ndarray, z1: np.ndarray) -> np.ndarray:
    """Per channel: row-major ravel of z0 then z1, stacked as (B, l, in_dim)."""
    b, _, _, l = z0.shape
    f0 = z0.transpose(0, 3, 1, 2).reshape(b, l, -1)
    f1 = z1.transpose(0, 3, 1, 2).reshape(b, l, -1)
    return np.concatenate([f0, f1], axis=2)


def merger_forward(z0: np.ndarray, z1: np.ndarray, params: LayerParams, *, with_cache: bool = False):
    """Merge two feature stacks channel by channel through affine maps.

    For channel i the flattened maps z0_i and z1_i are concatenated and
    sent through weights[i] (out_dim x in_dim) plus biases[i]; the result
    is reshaped to a square map.  Channels never mix.
    """
    z0b, squeeze = _as_batch(z0, 3)
    z1b, squeeze1 = _as_batch(z1, 3)
    if squeeze != squeeze1 or z0b.shape[0] != z1b.shape[0]:
        raise InvalidArgument("z0 and z1 must share the batch shape")
    l = params.weights.shape[0]
    if z0b.shape[3] != l or z1b.shape[3] != l:
        raise InvalidArgument(f"channel count mismatch: params expect {l}")
    in_dim = params.weights.shape[2]
    flat = _merger_flatten(z0b, z1b)
    if flat.shape[2] != in_dim:
        raise InvalidArgument(f"flattened input {flat.shape[2]} != weight input dim {in_dim}")
    pre = np.einsum("loi,bli->blo", params.weights, flat) + params.biases
    out_dim = params.weights.shape[1]
    side = int(round(np.sqrt(out_dim)))
    act = _activate(pre, params.activation)
    out = act.reshape(z0b.shape[0], l, side, side).transpose(0, 2, 3, 1)
    if squeeze:
        out = out[0]
    if with_cache:
        return out, MergerCache(flat, pre, (z0b.shape, z1b.shape), params, squeeze)
    return out


def merger_backward(dout: np.ndarray, cache: MergerCache):
    da = np.asarray(dout, dtype=np.float64)
    if cache.squeeze:
        da = da[None]
    b = da.shape[0]
    l = cache.params.weights.shape[0]
    da = da.transpose(0, 3, 1, 2).reshape(b, l, -1)
    da = da * _activate_grad(cache.pre, cache.params.activation)
    dw = np.einsum("blo,bli->loi", da, cache.flat)
    db = da.sum(axis=0)
    dflat = np.einsum("loi,blo->bli", cache.params.weights, da)
    s0, s1 = cache.shapes
    n0 = s0[1] * s0[2]
    dz0 = dflat[:, :, :n0].reshape(b, l, s0[1], s0[2]).transpose(0, 2, 3, 1)
    dz1 = dflat[:, :, n0:].reshape(b, l, s1[1], s1[2]).transpose(0, 2, 3, 1)
    if cache.squeeze:
        dz0, dz1 = dz0[0], dz1[0]
    return (dz0, dz1), dw, db


# ---------------------------------------------------------------------------
# generic dispatch, as a convenience for gradient checking and self tests

_FORWARD = {
    KIND_FC: fc_forward,
    KIND_CONV: conv2d_forward,
    KIND_TCONV: tconv2d_forward,
}

_BACKWARD = {
    KIND_FC: fc_backward,
    KIND_CONV: conv2d_backward,
    KIND_TCONV: tconv2d_backward,
    KIND_MERGER: merger_backward,
}


def forward(kind: str, x, params: LayerParams, *, with_cache: bool = False):
    if kind == KIND_MERGER:
        return merger_forward(x[0], x[1], params, with_cache=with_cache)
    return _FORWARD[kind](x, params, with_cache=with_cache)


def backward(kind: str, dout, cache):
    """Dispatch to the layer's backward pass; cache comes from its forward."""
    if cache is None:
        raise InvalidArgument("backward called without a forward cache")
    return _BACKWARD[kind](dout, cache)
