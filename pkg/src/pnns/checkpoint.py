"""Binary checkpoint format for trained predictors.

Layout (all integers little-endian):

  magic   "PNNS" (4 bytes)
  version u16
  family  u8   (0 = fully-connected, 1 = convolutional)
  m       u16
  fc_w    u32  (internal width; 0 for the convolutional family)
  n_enc   u16  (encoder layer count; 0 for the fully-connected family)
  per encoder layer: kernel u8, channels u32, stride u8
  alpha   f64
  iters   u64
  payload: per layer in declaration order (fc layers, or branch0,
           branch1, merger, decoder), weights then biases, raveled
           row-major as f32
  crc     u32  (CRC-32 of every preceding byte)
"""

from __future__ import annotations

import hashlib
import struct
import zlib

import numpy as np

from .errors import CorruptCheckpoint
from .models import (
    FAMILY_CONV,
    FAMILY_FC,
    ConvLayerSpec,
    Network,
    build_conv_from_encoder,
    build_fc,
)

MAGIC = b"PNNS"
VERSION = 1

_FAMILY_CODES = {FAMILY_FC: 0, FAMILY_CONV: 1}
_FAMILY_NAMES = {code: name for name, code in _FAMILY_CODES.items()}


def _header_bytes(net: Network) -> bytes:
    spec = net.spec
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HBH", VERSION, _FAMILY_CODES[spec.family], spec.m)
    out += struct.pack("<IH", spec.fc_width if spec.family == FAMILY_FC else 0, len(spec.encoder))
    for layer in spec.encoder:
        out += struct.pack("<BIB", layer.kernel, layer.channels, layer.stride)
    out += struct.pack("<dQ", net.alpha, net.iterations)
    return bytes(out)


def save_checkpoint(net: Network, path: str) -> None:
    """Serialize the network with 32-bit parameters and a trailing CRC."""
    blob = bytearray(_header_bytes(net))
    for layer in net.layers_in_order():
        blob += layer.weights.astype("<f4").tobytes()
        blob += layer.biases.astype("<f4").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def _take(data: bytes, offset: int, fmt: str):
    size = struct.calcsize(fmt)
    if offset + size > len(data):
        raise CorruptCheckpoint("checkpoint truncated")
    return struct.unpack_from(fmt, data, offset), offset + size


def load_checkpoint(path: str) -> Network:
    """Rebuild a network, verifying magic, version, CRC, and payload size."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 + 4 or data[:4] != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CorruptCheckpoint(f"{path}: CRC mismatch")
    offset = 4
    (version, family_code, m), offset = _take(data, offset, "<HBH")
    if version != VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported version {version}")
    if family_code not in _FAMILY_NAMES:
        raise CorruptCheckpoint(f"{path}: unknown family code {family_code}")
    (fc_width, n_enc), offset = _take(data, offset, "<IH")
    encoder = []
    for _ in range(n_enc):
        (kernel, channels, stride), offset = _take(data, offset, "<BIB")
        encoder.append(ConvLayerSpec(kernel, channels, stride))
    (alpha, iterations), offset = _take(data, offset, "<dQ")

    family = _FAMILY_NAMES[family_code]
    if family == FAMILY_FC:
        net = build_fc(m, p=fc_width)
    else:
        net = build_conv_from_encoder(m, tuple(encoder))
    net.alpha = alpha
    net.iterations = iterations

    payload = data[offset:-4]
    expected = sum(4 * p.size for p in net.param_tensors())
    if len(payload) != expected:
        raise CorruptCheckpoint(
            f"{path}: payload is {len(payload)} bytes, layer table implies {expected}"
        )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    pos = 0
    for layer in net.layers_in_order():
        for attr in ("weights", "biases"):
            tensor = getattr(layer, attr)
            n = tensor.size
            setattr(layer, attr, values[pos : pos + n].reshape(tensor.shape))
            pos += n
    return net


def checkpoint_digest(paths: list[str]) -> bytes:
    """8-byte digest identifying a predictor set, order-insensitive."""
    h = hashlib.sha256()
    for path in sorted(paths):
        with open(path, "rb") as fh:
            h.update(fh.read())
    return h.digest()[:8]


def network_digest(nets: list[Network]) -> bytes:
    """Digest over in-memory parameters; matches across save/load round trips."""
    h = hashlib.sha256()
    for net in sorted(nets, key=lambda n: (n.spec.family, n.spec.m)):
        h.update(struct.pack("<BH", _FAMILY_CODES[net.spec.family], net.spec.m))
        h.update(struct.pack("<d", net.alpha))
        for p in net.param_tensors():
            h.update(p.astype("<f4").tobytes())
    return h.digest()[:8]
