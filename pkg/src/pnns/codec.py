"""Simplified intra-only image codec.

Quadtree partitioning from 64x64 coding tree blocks down to 8x8 coding
blocks (with an optional split of an 8x8 block into four 4x4 prediction
blocks), full rate-distortion mode selection per leaf, orthonormal-DCT
residual coding with a uniform quantizer and exp-Golomb entropy codes,
and three mode-signalling schemes:

  baseline      the 35 reference modes only
  substitution  the learned predictor replaces the mode of index 18
  switch        the learned predictor joins the 35 modes with the
                1/3/4/4/7-bit codeword table and the modified MPM rule

The decoder reproduces the encoder's reconstruction bit-exactly; every
rate used in an RD decision is an exact bit count of the code actually
emitted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import hevc
from .bitio import BitReader, BitWriter
from .checkpoint import load_checkpoint, network_digest
from .context import ContextPair, apply_masks
from .errors import CorruptBitstream, InvalidArgument
from .metrics import psnr, sse
from .models import FAMILY_CONV, FAMILY_FC, Network, predict_block

MAGIC = b"PNC1"
CTB_SIZE = 64
MIN_CB = 8

SCHEME_BASELINE = "baseline"
SCHEME_SUBSTITUTION = "substitution"
SCHEME_SWITCH = "switch"
SCHEMES = (SCHEME_BASELINE, SCHEME_SUBSTITUTION, SCHEME_SWITCH)
_SCHEME_CODES = {name: i for i, name in enumerate(SCHEMES)}

SUBSTITUTED_MODE = 18  # the reference mode whose slot the learned predictor takes

PNNS_MODE = hevc.PNNS_MODE
_PRIORITY = (hevc.MODE_PLANAR, hevc.MODE_DC, hevc.MODE_VERTICAL)

_HEADER_LEN = 4 + 4 + 4 + 1 + 1 + 8


# ---------------------------------------------------------------------------
# predictor set


@dataclass
class PredictorSet:
    """The trained networks available to the codec, keyed by block width."""

    networks: dict[int, Network] = field(default_factory=dict)

    @classmethod
    def load_dir(cls, directory: str) -> "PredictorSet":
        nets = {}
        for path in sorted(Path(directory).glob("*.pnns")):
            net = load_checkpoint(str(path))
            nets[net.spec.m] = net
        return cls(networks=nets)

    def get(self, m: int) -> Network | None:
        return self.networks.get(m)

    def digest(self) -> bytes:
        if not self.networks:
            return bytes(8)
        return network_digest(list(self.networks.values()))


# ---------------------------------------------------------------------------
# transform and quantization


@lru_cache(maxsize=None)
def _dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis; the inverse is the transpose."""
    k = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    mat = np.cos(np.pi * (2 * j + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    mat[0] /= np.sqrt(2.0)
    return mat


def dct2(block: np.ndarray) -> np.ndarray:
    c = _dct_matrix(block.shape[0])
    return c @ np.asarray(block, dtype=np.float64) @ c.T


def idct2(coeffs: np.ndarray) -> np.ndarray:
    c = _dct_matrix(coeffs.shape[0])
    return c.T @ np.asarray(coeffs, dtype=np.float64) @ c


def quant_step(qp: int) -> float:
    if not 0 <= qp <= 51:
        raise InvalidArgument(f"QP {qp} outside [0, 51]")
    return 2.0 ** ((qp - 4) / 6.0)


def transform_quantize(residual: np.ndarray, qp: int) -> np.ndarray:
    """DCT then uniform quantization with round-half-away-from-zero."""
    scaled = dct2(residual) / quant_step(qp)
    return (np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)).astype(np.int64)


def dequantize_inverse(levels: np.ndarray, qp: int) -> np.ndarray:
    return idct2(levels.astype(np.float64) * quant_step(qp))


# ---------------------------------------------------------------------------
# coefficient coding: zig-zag, last-significant position, signed exp-Golomb


@lru_cache(maxsize=None)
def _zigzag_perm(n: int) -> np.ndarray:
    """Flat indices of the anti-diagonal scan over an n x n block."""
    order = []
    for s in range(2 * n - 1):
        rng = range(max(0, s - n + 1), min(s, n - 1) + 1)
        rows = rng if s % 2 else reversed(rng)
        order.extend(r * n + (s - r) for r in rows)
    return np.array(order, dtype=np.int64)


def _last_pos_bits(n: int) -> int:
    return int(n * n - 1).bit_length()


def _eg0_len(u: int) -> int:
    return 2 * (u + 1).bit_length() - 1


def _write_eg0(bw: BitWriter, u: int) -> None:
    n = u + 1
    nbits = n.bit_length()
    bw.write_bits(0, nbits - 1)
    bw.write_bits(n, nbits)


def _read_eg0(br: BitReader) -> int:
    zeros = 0
    while br.read_bit() == 0:
        zeros += 1
        if zeros > 64:
            raise CorruptBitstream("runaway exp-Golomb prefix")
    value = 1
    for _ in range(zeros):
        value = (value << 1) | br.read_bit()
    return value - 1


def coefficient_bits(levels: np.ndarray) -> int:
    """Exact bit count of :func:`code_coefficients` without writing."""
    n = levels.shape[0]
    zz = levels.ravel()[_zigzag_perm(n)]
    nz = np.flatnonzero(zz)
    if nz.size == 0:
        return 1
    last = int(nz[-1])
    mags = np.abs(zz[nz]).astype(np.float64)
    # per significant coefficient: exp-Golomb of magnitude-1 has
    # 2*bit_length(magnitude) - 1 bits, plus a sign bit
    bit_lengths = np.frexp(mags)[1]
    return 1 + _last_pos_bits(n) + last + int((2 * bit_lengths).sum())


def code_coefficients(bw: BitWriter, levels: np.ndarray) -> None:
    n = levels.shape[0]
    zz = levels.ravel()[_zigzag_perm(n)]
    nz = np.flatnonzero(zz)
    if nz.size == 0:
        bw.write_bit(0)
        return
    bw.write_bit(1)
    last = int(nz[-1])
    bw.write_bits(last, _last_pos_bits(n))
    for i in range(last + 1):
        v = int(zz[i])
        if i < last:
            bw.write_bit(1 if v else 0)
        if v or i == last:
            _write_eg0(bw, abs(v) - 1)
            bw.write_bit(1 if v < 0 else 0)


def decode_coefficients(br: BitReader, n: int) -> np.ndarray:
    zz = np.zeros(n * n, dtype=np.int64)
    if br.read_bit():
        last = br.read_bits(_last_pos_bits(n))
        if last >= n * n:
            raise CorruptBitstream(f"last position {last} outside {n}x{n} block")
        for i in range(last + 1):
            significant = br.read_bit() if i < last else 1
            if significant:
                mag = _read_eg0(br) + 1
                zz[i] = -mag if br.read_bit() else mag
        if zz[last] == 0:
            raise CorruptBitstream("last significant coefficient decoded as zero")
    out = np.zeros(n * n, dtype=np.int64)
    out[_zigzag_perm(n)] = zz
    return out.reshape(n, n)


# ---------------------------------------------------------------------------
# most probable modes and mode signalling


def _first_priority(excluded) -> int:
    return next(k for k in _PRIORITY if k not in excluded)


def derive_mpm(left_mode: int | None, above_mode: int | None, scheme: str) -> list[int]:
    """The three most probable modes from the two neighbor modes.

    Missing neighbors count as DC.  Under the switch scheme a neighbor
    that used the learned mode is first replaced by the highest-priority
    of (planar, DC, vertical) that keeps the list distinct, so the MPM
    list never aliases the learned mode's own 1-bit codeword.
    """
    left = hevc.MODE_DC if left_mode is None else left_mode
    above = hevc.MODE_DC if above_mode is None else above_mode
    if scheme == SCHEME_SWITCH:
        if left == PNNS_MODE:
            left = _first_priority({above})
        if above == PNNS_MODE:
            above = _first_priority({left})
    if left == above:
        if left >= 2:
            return [left, 2 + ((left + 29) % 32), 2 + ((left - 1) % 32)]
        return [hevc.MODE_PLANAR, hevc.MODE_DC, hevc.MODE_VERTICAL]
    return [left, above, _first_priority({left, above})]


def _non_mpm_modes(mpms: list[int]) -> list[int]:
    return [k for k in range(hevc.N_MODES) if k not in mpms]


def mode_code_length(mode: int, mpms: list[int], scheme: str) -> int:
    """Exact codeword length in bits for a mode under a scheme."""
    if scheme == SCHEME_SWITCH:
        if mode == PNNS_MODE:
            return 1
        if mode in mpms:
            return 3 if mpms.index(mode) == 0 else 4
        return 7
    if mode in mpms:
        return 2 if mpms.index(mode) == 0 else 3
    return 6


def write_mode(bw: BitWriter, mode: int, mpms: list[int], scheme: str) -> None:
    if scheme == SCHEME_SWITCH:
        if mode == PNNS_MODE:
            bw.write_bit(1)
            return
        bw.write_bit(0)
        if mode in mpms:
            idx = mpms.index(mode)
            if idx == 0:
                bw.write_bits(0b10, 2)  # full codeword 010
            else:
                bw.write_bits(0b110 if idx == 1 else 0b111, 3)  # 0110 / 0111
        else:
            bw.write_bit(0)
            bw.write_bits(_non_mpm_modes(mpms).index(mode), 5)
        return
    if mode in mpms:
        bw.write_bit(1)
        idx = mpms.index(mode)
        if idx == 0:
            bw.write_bit(0)
        else:
            bw.write_bits(0b10 if idx == 1 else 0b11, 2)
    else:
        bw.write_bit(0)
        bw.write_bits(_non_mpm_modes(mpms).index(mode), 5)


def read_mode(br: BitReader, mpms: list[int], scheme: str) -> int:
    if scheme == SCHEME_SWITCH:
        if br.read_bit():
            return PNNS_MODE
        if br.read_bit():
            return mpms[0] if br.read_bit() == 0 else mpms[1 + br.read_bit()]
        return _non_mpm_modes(mpms)[br.read_bits(5)]
    if br.read_bit():
        return mpms[0] if br.read_bit() == 0 else mpms[1 + br.read_bit()]
    return _non_mpm_modes(mpms)[br.read_bits(5)]


def _is_neural(mode_sig: int, scheme: str) -> bool:
    if scheme == SCHEME_SWITCH:
        return mode_sig == PNNS_MODE
    if scheme == SCHEME_SUBSTITUTION:
        return mode_sig == SUBSTITUTED_MODE
    return False


# ---------------------------------------------------------------------------
# the learned predictor's context inside the codec


def _region_ok(decoded: np.ndarray, r0: int, r1: int, c0: int, c1: int) -> np.ndarray:
    h, w = decoded.shape
    ok = np.zeros((r1 - r0, c1 - c0), dtype=bool)
    rr1, cc1 = min(r1, h), min(c1, w)
    rr0, cc0 = max(r0, 0), max(c0, 0)
    if rr1 > rr0 and cc1 > cc0:
        ok[rr0 - r0 : rr1 - r0, cc0 - c0 : cc1 - c0] = decoded[rr0:rr1, cc0:cc1]
    return ok


def _round_up4(n: int) -> int:
    return (n + 3) & ~3


def neural_context(
    recon: np.ndarray, decoded: np.ndarray, r: int, c: int, m: int, alpha: float
) -> ContextPair | None:
    """Masked context from the reconstruction, or None for the zero prediction.

    The mask extents n0 and n1 are the smallest multiples of 4 whose
    strips cover every pixel of the context that is not decoded yet (or
    never will be, past the image edges); the block's position in the
    z-scan keeps both within m.
    """
    if r - m < 0 or c - m < 0:
        return None
    ok0 = _region_ok(decoded, r, r + 2 * m, c - m, c)
    rows_ok = ok0.all(axis=1)
    bad = np.flatnonzero(~rows_ok)
    n0 = 0 if bad.size == 0 else _round_up4(2 * m - int(bad[0]))
    ok1 = _region_ok(decoded, r - m, r, c - m, c + 2 * m)
    cols_ok = ok1.all(axis=0)
    bad = np.flatnonzero(~cols_ok)
    n1 = 0 if bad.size == 0 else _round_up4(3 * m - int(bad[0]))
    if n0 > m or n1 > m:
        return None
    h, w = recon.shape
    x0 = np.full((2 * m, m), alpha, dtype=np.float64)
    x1 = np.full((m, 3 * m), alpha, dtype=np.float64)
    r1, c1 = min(r + 2 * m, h), min(c + 2 * m, w)
    x0[: r1 - r, :] = recon[r:r1, c - m : c]
    x1[:, : c1 - (c - m)] = recon[r - m : r, c - m : c1]
    apply_masks(x0, x1, n0, n1, alpha, m)
    return ContextPair(m=m, x0=x0, x1=x1, n0=n0, n1=n1, alpha=alpha)


# ---------------------------------------------------------------------------
# encoder


@dataclass
class EncodeStats:
    """Per-encode bookkeeping for rates and mode-selection frequencies."""

    width: int
    height: int
    qp: int
    scheme: str
    bits: int = 0
    psnr_db: float = 0.0
    selections: dict[int, dict[str, int]] = field(default_factory=dict)

    @property
    def bpp(self) -> float:
        return self.bits / (self.width * self.height)

    def record(self, m: int, label: str) -> None:
        per_width = self.selections.setdefault(m, {})
        per_width[label] = per_width.get(label, 0) + 1


def mode_frequency_nu(stats: EncodeStats | list[EncodeStats]) -> dict[int, dict[str, float]]:
    """Fraction of RD wins per mode at each block width; rows sum to 1."""
    runs = stats if isinstance(stats, list) else [stats]
    merged: dict[int, dict[str, int]] = {}
    for run in runs:
        for m, row in run.selections.items():
            tgt = merged.setdefault(m, {})
            for label, count in row.items():
                tgt[label] = tgt.get(label, 0) + count
    out: dict[int, dict[str, float]] = {}
    for m, row in merged.items():
        total = sum(row.values())
        if total:
            out[m] = {label: count / total for label, count in row.items()}
    return out


class _EncState:
    """Mutable per-image coding state shared by all trials."""

    def __init__(self, src: np.ndarray, qp: int, scheme: str, predictors: PredictorSet):
        self.src = src
        self.qp = qp
        self.scheme = scheme
        self.predictors = predictors
        h, w = src.shape
        self.recon = np.zeros((h, w), dtype=np.uint8)
        self.decoded = np.zeros((h, w), dtype=bool)
        self.modes = np.full((h // 4, w // 4), -1, dtype=np.int16)
        self.lam_rd = hevc.lambda_rd(qp)
        self.lam_fast = hevc.lambda_fast(qp)

    def save(self, r: int, c: int, size: int):
        return (
            self.recon[r : r + size, c : c + size].copy(),
            self.decoded[r : r + size, c : c + size].copy(),
            self.modes[r // 4 : (r + size) // 4, c // 4 : (c + size) // 4].copy(),
        )

    def restore(self, r: int, c: int, size: int, snap) -> None:
        self.recon[r : r + size, c : c + size] = snap[0]
        self.decoded[r : r + size, c : c + size] = snap[1]
        self.modes[r // 4 : (r + size) // 4, c // 4 : (c + size) // 4] = snap[2]

    def neighbor_modes(self, r: int, c: int):
        left = int(self.modes[r // 4, (c - 1) // 4]) if c > 0 else -1
        above = int(self.modes[(r - 1) // 4, c // 4]) if r > 0 else -1
        return (None if left < 0 else left), (None if above < 0 else above)


def _neural_prediction(state: _EncState, r: int, c: int, m: int) -> np.ndarray | None:
    """The learned prediction, the zero prediction, or None if no model."""
    net = state.predictors.get(m)
    if net is None:
        return None
    ctx = neural_context(state.recon, state.decoded, r, c, m, net.alpha)
    if ctx is None:
        return np.zeros((m, m))
    return predict_block(net, ctx)


def _code_leaf(state: _EncState, r: int, c: int, m: int):
    """Mode competition and residual coding for one prediction block.

    Applies the winner to the coding state and returns
    (rd_cost, bits, leaf record).
    """
    src = state.src[r : r + m, c : c + m].astype(np.float64)
    mpms = derive_mpm(*state.neighbor_modes(r, c), state.scheme)
    refs = hevc.build_reference_samples(state.recon, (r, c), m, available=state.decoded)
    preds = hevc.predict_all_modes(refs).astype(np.float64)
    scheme = state.scheme

    neural = None if scheme == SCHEME_BASELINE else _neural_prediction(state, r, c, m)
    candidates = list(range(hevc.N_MODES))
    if scheme == SCHEME_SUBSTITUTION:
        if neural is None:
            candidates.remove(SUBSTITUTED_MODE)
        else:
            preds[SUBSTITUTED_MODE] = neural  # competes under mode 18's codewords

    signal_bits = {k: mode_code_length(k, mpms, scheme) for k in range(hevc.N_MODES)}
    fast = hevc.fast_mode_list(
        src,
        refs,
        state.lam_fast,
        hevc.fast_list_size(m),
        signal_bits=signal_bits,
        predictions=preds,
        candidates=candidates,
    )
    if scheme == SCHEME_SWITCH and neural is not None and PNNS_MODE not in fast:
        fast.append(PNNS_MODE)

    def prediction_of(mode_sig: int) -> np.ndarray:
        if scheme == SCHEME_SWITCH and mode_sig == PNNS_MODE:
            return neural
        return preds[mode_sig]

    best = None
    for mode_sig in hevc.rd_candidate_order(fast):
        pred = prediction_of(mode_sig)
        levels = transform_quantize(src - pred, state.qp)
        bits = mode_code_length(mode_sig, mpms, scheme) + coefficient_bits(levels)
        rec = np.clip(np.floor(pred + dequantize_inverse(levels, state.qp) + 0.5), 0, 255)
        dist = sse(src, rec)
        cost = dist + state.lam_rd * bits
        if best is None or cost < best[0]:
            best = (cost, bits, mode_sig, levels, rec)
    cost, bits, mode_sig, levels, rec = best

    state.recon[r : r + m, c : c + m] = rec.astype(np.uint8)
    state.decoded[r : r + m, c : c + m] = True
    state.modes[r // 4 : (r + m) // 4, c // 4 : (c + m) // 4] = mode_sig
    return cost, bits, {"r": r, "c": c, "m": m, "mode": mode_sig, "levels": levels}


def _quad_offsets(size: int):
    half = size // 2
    return ((0, 0), (0, half), (half, 0), (half, half))


def _compress_cb(state: _EncState, r: int, c: int, size: int):
    """Recursive RD split decision; ties keep the unsplit variant."""
    lam = state.lam_rd
    if size == MIN_CB:
        pre = state.save(r, c, size)
        cost_one, bits_one, leaf = _code_leaf(state, r, c, size)
        cost_one, bits_one = cost_one + lam, bits_one + 1  # pb-split flag
        post_one = state.save(r, c, size)
        state.restore(r, c, size, pre)
        cost_four, bits_four, leaves = lam, 1, []
        for dr, dc in _quad_offsets(size):
            cost_i, bits_i, leaf_i = _code_leaf(state, r + dr, c + dc, size // 2)
            cost_four += cost_i
            bits_four += bits_i
            leaves.append(leaf_i)
        if cost_one <= cost_four:
            state.restore(r, c, size, post_one)
            return cost_one, bits_one, {"size": size, "pb_split": False, "leaves": [leaf]}
        return cost_four, bits_four, {"size": size, "pb_split": True, "leaves": leaves}

    pre = state.save(r, c, size)
    cost_leaf, bits_leaf, leaf = _code_leaf(state, r, c, size)
    cost_leaf, bits_leaf = cost_leaf + lam, bits_leaf + 1  # split flag
    post_leaf = state.save(r, c, size)
    state.restore(r, c, size, pre)
    cost_split, bits_split, children = lam, 1, []
    for dr, dc in _quad_offsets(size):
        cost_i, bits_i, child = _compress_cb(state, r + dr, c + dc, size // 2)
        cost_split += cost_i
        bits_split += bits_i
        children.append(child)
    if cost_leaf <= cost_split:
        state.restore(r, c, size, post_leaf)
        return cost_leaf, bits_leaf, {"size": size, "split": False, "leaves": [leaf]}
    return cost_split, bits_split, {"size": size, "split": True, "children": children}


def _serialize_leaf(bw: BitWriter, leaf: dict, modes: np.ndarray, scheme: str) -> None:
    r, c, m = leaf["r"], leaf["c"], leaf["m"]
    left = int(modes[r // 4, (c - 1) // 4]) if c > 0 else -1
    above = int(modes[(r - 1) // 4, c // 4]) if r > 0 else -1
    mpms = derive_mpm(None if left < 0 else left, None if above < 0 else above, scheme)
    write_mode(bw, leaf["mode"], mpms, scheme)
    code_coefficients(bw, leaf["levels"])
    modes[r // 4 : (r + m) // 4, c // 4 : (c + m) // 4] = leaf["mode"]


def _serialize_cb(bw: BitWriter, node: dict, modes: np.ndarray, scheme: str) -> None:
    if node["size"] == MIN_CB:
        bw.write_bit(1 if node["pb_split"] else 0)
        for leaf in node["leaves"]:
            _serialize_leaf(bw, leaf, modes, scheme)
        return
    if node["split"]:
        bw.write_bit(1)
        for child in node["children"]:
            _serialize_cb(bw, child, modes, scheme)
    else:
        bw.write_bit(0)
        _serialize_leaf(bw, node["leaves"][0], modes, scheme)


def _collect_stats(node: dict, stats: EncodeStats, scheme: str) -> None:
    for key in ("leaves", "children"):
        for item in node.get(key, ()):
            if "mode" in item:
                label = "pnns" if _is_neural(item["mode"], scheme) else str(item["mode"])
                stats.record(item["m"], label)
            else:
                _collect_stats(item, stats, scheme)


def _pad_to_ctb(image: np.ndarray) -> np.ndarray:
    h, w = image.shape
    ph = (CTB_SIZE - h % CTB_SIZE) % CTB_SIZE
    pw = (CTB_SIZE - w % CTB_SIZE) % CTB_SIZE
    if ph or pw:
        return np.pad(image, ((0, ph), (0, pw)), mode="edge")
    return image


def encode_image(
    image: np.ndarray,
    qp: int,
    scheme: str,
    predictors: PredictorSet | None = None,
) -> tuple[bytes, np.ndarray, EncodeStats]:
    """Encode a grayscale image; returns (bitstream, reconstruction, stats)."""
    if scheme not in SCHEMES:
        raise InvalidArgument(f"unknown scheme {scheme!r}")
    quant_step(qp)  # validates the QP range
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise InvalidArgument("codec input must be a 2-D grayscale image")
    predictors = predictors or PredictorSet()
    height, width = image.shape
    padded = _pad_to_ctb(image)
    state = _EncState(padded, qp, scheme, predictors)

    digest = predictors.digest() if scheme != SCHEME_BASELINE else bytes(8)
    header = MAGIC + width.to_bytes(4, "little") + height.to_bytes(4, "little")
    header += bytes([qp, _SCHEME_CODES[scheme]]) + digest

    bw = BitWriter()
    bw.write_bytes(header)
    stats = EncodeStats(width=width, height=height, qp=qp, scheme=scheme)
    trees = []
    payload_bits = 0
    for r in range(0, padded.shape[0], CTB_SIZE):
        for c in range(0, padded.shape[1], CTB_SIZE):
            _, bits, tree = _compress_cb(state, r, c, CTB_SIZE)
            payload_bits += bits
            trees.append(tree)

    serial_modes = np.full_like(state.modes, -1)
    before = bw.bits_written
    for tree in trees:
        _serialize_cb(bw, tree, serial_modes, scheme)
        _collect_stats(tree, stats, scheme)
    assert bw.bits_written - before == payload_bits, "counted bits diverge from stream"

    data = bw.getvalue()
    recon = state.recon[:height, :width].copy()
    stats.bits = 8 * len(data)
    stats.psnr_db = psnr(image, recon)
    return data, recon, stats


# ---------------------------------------------------------------------------
# decoder


class _DecState:
    def __init__(self, height: int, width: int, qp: int, scheme: str, predictors: PredictorSet):
        self.qp = qp
        self.scheme = scheme
        self.predictors = predictors
        self.recon = np.zeros((height, width), dtype=np.uint8)
        self.decoded = np.zeros((height, width), dtype=bool)
        self.modes = np.full((height // 4, width // 4), -1, dtype=np.int16)


def _decode_leaf(br: BitReader, state: _DecState, r: int, c: int, m: int) -> None:
    left = int(state.modes[r // 4, (c - 1) // 4]) if c > 0 else -1
    above = int(state.modes[(r - 1) // 4, c // 4]) if r > 0 else -1
    mpms = derive_mpm(None if left < 0 else left, None if above < 0 else above, state.scheme)
    mode_sig = read_mode(br, mpms, state.scheme)
    levels = decode_coefficients(br, m)
    if _is_neural(mode_sig, state.scheme):
        net = state.predictors.get(m)
        if net is None:
            raise CorruptBitstream(f"stream uses the learned mode at m={m} but no model is loaded")
        ctx = neural_context(state.recon, state.decoded, r, c, m, net.alpha)
        pred = np.zeros((m, m)) if ctx is None else predict_block(net, ctx)
    else:
        refs = hevc.build_reference_samples(state.recon, (r, c), m, available=state.decoded)
        pred = hevc.predict_mode(refs, mode_sig).astype(np.float64)
    rec = np.clip(np.floor(pred + dequantize_inverse(levels, state.qp) + 0.5), 0, 255)
    state.recon[r : r + m, c : c + m] = rec.astype(np.uint8)
    state.decoded[r : r + m, c : c + m] = True
    state.modes[r // 4 : (r + m) // 4, c // 4 : (c + m) // 4] = mode_sig


def _decode_cb(br: BitReader, state: _DecState, r: int, c: int, size: int) -> None:
    if size == MIN_CB:
        if br.read_bit():
            for dr, dc in _quad_offsets(size):
                _decode_leaf(br, state, r + dr, c + dc, size // 2)
        else:
            _decode_leaf(br, state, r, c, size)
        return
    if br.read_bit():
        for dr, dc in _quad_offsets(size):
            _decode_cb(br, state, r + dr, c + dc, size // 2)
    else:
        _decode_leaf(br, state, r, c, size)


def parse_header(data: bytes) -> tuple[int, int, int, str, bytes]:
    if len(data) < _HEADER_LEN or data[:4] != MAGIC:
        raise CorruptBitstream("bad magic")
    width = int.from_bytes(data[4:8], "little")
    height = int.from_bytes(data[8:12], "little")
    qp = data[12]
    scheme_code = data[13]
    if scheme_code >= len(SCHEMES):
        raise CorruptBitstream(f"unknown scheme code {scheme_code}")
    return width, height, qp, SCHEMES[scheme_code], data[14:22]


def decode_image(data: bytes, predictors: PredictorSet | None = None) -> np.ndarray:
    """Decode a bitstream back to the encoder's reconstruction."""
    width, height, qp, scheme, digest = parse_header(data)
    predictors = predictors or PredictorSet()
    if scheme != SCHEME_BASELINE and digest != predictors.digest():
        raise CorruptBitstream("loaded predictor set does not match the stream's digest")
    if width == 0 or height == 0:
        raise CorruptBitstream("empty image dimensions")
    ph = (height + CTB_SIZE - 1) // CTB_SIZE * CTB_SIZE
    pw = (width + CTB_SIZE - 1) // CTB_SIZE * CTB_SIZE
    state = _DecState(ph, pw, qp, scheme, predictors)
    br = BitReader(data)
    br.read_bytes(_HEADER_LEN)
    for r in range(0, ph, CTB_SIZE):
        for c in range(0, pw, CTB_SIZE):
            _decode_cb(br, state, r, c, CTB_SIZE)
    return state.recon[:height, :width].copy()
