"""Construction and end-to-end evaluation of the block predictors.

Two families exist per block width m: a four-layer fully-connected
network over the vectorized context (m in {4, 8, 16}), and a
convolutional network (m in {4, 8, 16, 32, 64}) made of two encoder
stacks with separate parameters for x0 and x1, a channelwise affine
merger, and a transposed-convolution decoder.  The encoder stride
product is always m/4, so both branches end at 8x4 and 4x12 feature
maps, the merged stack is 4x4, and the decoder returns exactly m x m.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .context import (
    BLOCK_WIDTHS,
    ContextPair,
    postprocess_prediction,
    vectorize_context,
)
from .errors import InvalidArgument

FAMILY_FC = "fc"
FAMILY_CONV = "conv"

FC_WIDTHS = (4, 8, 16)
FC_INTERNAL_SIZE = 1200

# Encoder stacks per block width: (kernel, filters, stride) from input
# channel count 1.  The decoder mirrors the stack with transposed
# convolutions and ends in one channel with no activation.
CONV_STACKS: dict[int, tuple[tuple[int, int, int], ...]] = {
    4: ((3, 32, 1), (3, 32, 1)),
    8: ((5, 64, 2), (3, 64, 1)),
    16: ((5, 64, 2), (3, 64, 1), (5, 128, 2), (3, 128, 1)),
    32: ((5, 64, 2), (5, 128, 2), (3, 128, 1), (5, 256, 2), (3, 256, 1)),
    64: ((5, 64, 2), (5, 128, 2), (5, 256, 2), (5, 512, 2), (3, 512, 1)),
}

MERGED_SIDE = 4
MERGER_IN_DIM = 8 * 4 + 4 * 12  # flattened branch outputs per channel
MERGER_OUT_DIM = MERGED_SIDE * MERGED_SIDE


@dataclass(frozen=True)
class ConvLayerSpec:
    kernel: int
    channels: int
    stride: int


@dataclass(frozen=True)
class NetworkSpec:
    """Family, block width, and the concrete layer dimensions."""

    family: str
    m: int
    fc_width: int = FC_INTERNAL_SIZE
    encoder: tuple[ConvLayerSpec, ...] = ()

    @property
    def merger_channels(self) -> int:
        return self.encoder[-1].channels

    def decoder_layers(self) -> tuple[ConvLayerSpec, ...]:
        """Mirror of the encoder: reversed kernels/strides, channel chain
        walked backwards down to the single output channel."""
        chain = [1] + [layer.channels for layer in self.encoder]
        out = []
        for i in range(len(self.encoder) - 1, -1, -1):
            layer = self.encoder[i]
            out.append(ConvLayerSpec(layer.kernel, chain[i], layer.stride))
        return tuple(out)


@dataclass
class Network:
    """A parameterized predictor: spec, layer parameters, and the dataset mean."""

    spec: NetworkSpec
    alpha: float = 0.0
    iterations: int = 0
    fc_layers: list[nn.LayerParams] = field(default_factory=list)
    branch0: list[nn.LayerParams] = field(default_factory=list)
    branch1: list[nn.LayerParams] = field(default_factory=list)
    merger: nn.LayerParams | None = None
    decoder: list[nn.LayerParams] = field(default_factory=list)

    def layers_in_order(self) -> list[nn.LayerParams]:
        """Declaration order, fixed by the checkpoint format."""
        if self.spec.family == FAMILY_FC:
            return list(self.fc_layers)
        return [*self.branch0, *self.branch1, self.merger, *self.decoder]

    def param_tensors(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers_in_order():
            out.append(layer.weights)
            out.append(layer.biases)
        return out

    def weight_tensors(self) -> list[np.ndarray]:
        return [layer.weights for layer in self.layers_in_order()]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.param_tensors())


def _scaled(channels: int, scale: float) -> int:
    return max(1, int(round(channels * scale)))


def build_fc(m: int, p: int = FC_INTERNAL_SIZE, rng: np.random.Generator | None = None) -> Network:
    """Four fully-connected layers: 5m^2 -> p -> p -> p -> m^2."""
    if m not in FC_WIDTHS:
        raise InvalidArgument(f"fully-connected family supports m in {FC_WIDTHS}, got {m}")
    rng = rng or np.random.default_rng(0)
    spec = NetworkSpec(family=FAMILY_FC, m=m, fc_width=p)
    dims = [5 * m * m, p, p, p, m * m]
    layers = []
    for i in range(4):
        act = nn.ACT_LRELU if i < 3 else nn.ACT_NONE
        layers.append(
            nn.init_params(
                nn.KIND_FC,
                rng=rng,
                first_layer=(i == 0),
                activation=act,
                in_dim=dims[i],
                out_dim=dims[i + 1],
            )
        )
    return Network(spec=spec, fc_layers=layers)


def build_conv(
    m: int, rng: np.random.Generator | None = None, channel_scale: float = 1.0
) -> Network:
    """Two encoder branches, the channelwise merger, and the decoder.

    `channel_scale` shrinks every filter count proportionally; it exists
    for fast tests and defaults to the full-size architecture.
    """
    if m not in BLOCK_WIDTHS:
        raise InvalidArgument(f"convolutional family supports m in {BLOCK_WIDTHS}, got {m}")
    encoder = tuple(
        ConvLayerSpec(k, _scaled(c, channel_scale), s) for (k, c, s) in CONV_STACKS[m]
    )
    return build_conv_from_encoder(m, encoder, rng)


def build_conv_from_encoder(
    m: int, encoder: tuple[ConvLayerSpec, ...], rng: np.random.Generator | None = None
) -> Network:
    """Build the convolutional family from an explicit encoder table."""
    rng = rng or np.random.default_rng(0)
    spec = NetworkSpec(family=FAMILY_CONV, m=m, encoder=encoder)

    def make_branch() -> list[nn.LayerParams]:
        layers = []
        c_in = 1
        for i, layer in enumerate(encoder):
            layers.append(
                nn.init_params(
                    nn.KIND_CONV,
                    rng=rng,
                    first_layer=(i == 0),
                    activation=nn.ACT_LRELU,
                    stride=layer.stride,
                    kernel=layer.kernel,
                    c_in=c_in,
                    c_out=layer.channels,
                )
            )
            c_in = layer.channels
        return layers

    branch0 = make_branch()
    branch1 = make_branch()
    merger = nn.init_params(
        nn.KIND_MERGER,
        rng=rng,
        activation=nn.ACT_LRELU,
        channels=spec.merger_channels,
        in_dim=MERGER_IN_DIM,
        out_dim=MERGER_OUT_DIM,
    )
    decoder = []
    c_in = spec.merger_channels
    dec_specs = spec.decoder_layers()
    for i, layer in enumerate(dec_specs):
        act = nn.ACT_LRELU if i < len(dec_specs) - 1 else nn.ACT_NONE
        decoder.append(
            nn.init_params(
                nn.KIND_TCONV,
                rng=rng,
                activation=act,
                stride=layer.stride,
                kernel=layer.kernel,
                c_in=c_in,
                c_out=layer.channels,
            )
        )
        c_in = layer.channels
    return Network(spec=spec, branch0=branch0, branch1=branch1, merger=merger, decoder=decoder)


# ---------------------------------------------------------------------------
# whole-network evaluation


def fc_net_forward(net: Network, x: np.ndarray, *, with_cache: bool = False):
    """x is (batch, 5m^2); returns (batch, m^2) centered predictions."""
    caches = []
    out = x
    for layer in net.fc_layers:
        out, cache = nn.fc_forward(out, layer, with_cache=True)
        caches.append(cache)
    return (out, caches) if with_cache else out


def fc_net_backward(net: Network, dout: np.ndarray, caches):
    """Returns (dx, grads) with grads aligned to param_tensors order."""
    grads: list[np.ndarray] = []
    d = dout
    for cache in reversed(caches):
        d, dw, db = nn.fc_backward(d, cache)
        grads.insert(0, db)
        grads.insert(0, dw)
    return d, grads


def conv_net_forward(net: Network, x0: np.ndarray, x1: np.ndarray, *, with_cache: bool = False):
    """x0 is (batch, 2m, m, 1), x1 is (batch, m, 3m, 1); output (batch, m, m, 1)."""
    c0, c1, cd = [], [], []
    z0, z1 = x0, x1
    for layer in net.branch0:
        z0, cache = nn.conv2d_forward(z0, layer, with_cache=True)
        c0.append(cache)
    for layer in net.branch1:
        z1, cache = nn.conv2d_forward(z1, layer, with_cache=True)
        c1.append(cache)
    merged, cm = nn.merger_forward(z0, z1, net.merger, with_cache=True)
    out = merged
    for layer in net.decoder:
        out, cache = nn.tconv2d_forward(out, layer, with_cache=True)
        cd.append(cache)
    return (out, (c0, c1, cm, cd)) if with_cache else out


def conv_net_backward(net: Network, dout: np.ndarray, caches):
    c0, c1, cm, cd = caches
    d = dout
    g_dec: list[np.ndarray] = []
    for cache in reversed(cd):
        d, dw, db = nn.tconv2d_backward(d, cache)
        g_dec.insert(0, db)
        g_dec.insert(0, dw)
    (dz0, dz1), dwm, dbm = nn.merger_backward(d, cm)
    g0: list[np.ndarray] = []
    for cache in reversed(c0):
        dz0, dw, db = nn.conv2d_backward(dz0, cache)
        g0.insert(0, db)
        g0.insert(0, dw)
    g1: list[np.ndarray] = []
    for cache in reversed(c1):
        dz1, dw, db = nn.conv2d_backward(dz1, cache)
        g1.insert(0, db)
        g1.insert(0, dw)
    grads = [*g0, *g1, dwm, dbm, *g_dec]
    return (dz0, dz1), grads


def predict_centered_batch(net: Network, x0c: np.ndarray, x1c: np.ndarray) -> np.ndarray:
    """Centered contexts in, centered (batch, m, m) predictions out."""
    b = x0c.shape[0]
    m = net.spec.m
    if net.spec.family == FAMILY_FC:
        flat = np.concatenate([x0c.reshape(b, -1), x1c.reshape(b, -1)], axis=1)
        return fc_net_forward(net, flat).reshape(b, m, m)
    out = conv_net_forward(net, x0c[..., None], x1c[..., None])
    return out[..., 0]


def predict_block(net: Network, ctx: ContextPair) -> np.ndarray:
    """Full prediction pipeline: center, run the network, uncenter, clip."""
    if ctx.m != net.spec.m:
        raise InvalidArgument(f"network is for m={net.spec.m}, context has m={ctx.m}")
    if abs(ctx.alpha - net.alpha) > 1e-9:
        # the mask fill must match the centering mean or masked pixels leak
        raise InvalidArgument(
            f"context extracted with alpha={ctx.alpha}, network expects {net.alpha}"
        )
    x0c, x1c = ctx.centered()
    if net.spec.family == FAMILY_FC:
        flat = vectorize_context(x0c, x1c)
        yc = fc_net_forward(net, flat[None])[0].reshape(ctx.m, ctx.m)
    else:
        yc = conv_net_forward(net, x0c[None, :, :, None], x1c[None, :, :, None])[0, :, :, 0]
    return postprocess_prediction(yc, net.alpha)
