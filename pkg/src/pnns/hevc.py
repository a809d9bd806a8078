"""Reference H.265-style intra predictor over the one-row/one-column neighborhood.

All 35 modes (planar, DC, 33 angular) are computed with the standard
integer arithmetic: the {+-32..+-2, 0} displacement table, two-tap
1/32-pel interpolation, and the reference substitution scan.  No
mode-dependent reference smoothing or boundary filtering is applied, so
modes 10 and 26 are exact row/column copies.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgument
from .metrics import psnr, sad

N_MODES = 35
MODE_PLANAR = 0
MODE_DC = 1
MODE_HORIZONTAL = 10
MODE_VERTICAL = 26
PNNS_MODE = 35  # the learned predictor, outside the 0..34 range

UNAVAILABLE_FILL = 128

# displacement per mode 2..34, in 1/32-pel units
_ANGLES = {
    2: 32, 3: 26, 4: 21, 5: 17, 6: 13, 7: 9, 8: 5, 9: 2, 10: 0,
    11: -2, 12: -5, 13: -9, 14: -13, 15: -17, 16: -21, 17: -26, 18: -32,
    19: -26, 20: -21, 21: -17, 22: -13, 23: -9, 24: -5, 25: -2, 26: 0,
    27: 2, 28: 5, 29: 9, 30: 13, 31: 17, 32: 21, 33: 26, 34: 32,
}

# round(256 * 32 / angle) for the negative angles
_INV_ANGLES = {-2: -4096, -5: -1638, -9: -910, -13: -630,
               -17: -482, -21: -390, -26: -315, -32: -256}


@dataclass
class ReferenceSamples:
    """Filled reference row/column for one block.

    `above` holds 2m+1 samples starting at the top-left corner pixel;
    `left` holds the 2m samples down the left edge.
    """

    m: int
    above: np.ndarray  # (2m+1,) int64
    left: np.ndarray  # (2m,) int64


def build_reference_samples(
    decoded: np.ndarray,
    position: tuple[int, int],
    m: int,
    available: np.ndarray | None = None,
) -> ReferenceSamples:
    """Gather the neighborhood, substituting unavailable samples.

    A sample is available when it lies inside the image and, if an
    availability map is given, is marked decoded there.  Substitution
    scans from the bottom-left sample upward through the left column,
    the corner, then rightward along the above row: the first available
    value back-fills everything before it and each later unavailable
    sample copies its predecessor.  With nothing available at all, every
    sample becomes 128.
    """
    row, col = position
    h, w = decoded.shape
    # scan order: left column bottom-up, corner, above row left-to-right
    rows = np.concatenate(
        [np.arange(row + 2 * m - 1, row - 1, -1), [row - 1], np.full(2 * m, row - 1)]
    )
    cols = np.concatenate([np.full(2 * m + 1, col - 1), np.arange(col, col + 2 * m)])
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    rr, cc = np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1)
    values = decoded[rr, cc].astype(np.int64)
    ok = inside if available is None else inside & available[rr, cc]

    if not ok.any():
        values[:] = UNAVAILABLE_FILL
    elif not ok.all():
        n = values.size
        idx = np.where(ok, np.arange(n), -1)
        np.maximum.accumulate(idx, out=idx)
        first = int(np.flatnonzero(ok)[0])
        idx[idx < 0] = first  # leading gap takes the first available sample
        values = values[idx]

    left = values[: 2 * m][::-1].copy()
    above = values[2 * m :].copy()
    return ReferenceSamples(m=m, above=above, left=left)


def _predict_planar(refs: ReferenceSamples) -> np.ndarray:
    m = refs.m
    shift = int(np.log2(m)) + 1
    xs = np.arange(m)
    top = refs.above[1 : m + 1]
    top_right = refs.above[m + 1]
    left = refs.left[:m]
    bottom_left = refs.left[m]
    horiz = (m - 1 - xs)[None, :] * left[:, None] + (xs + 1)[None, :] * top_right
    vert = (m - 1 - xs)[:, None] * top[None, :] + (xs + 1)[:, None] * bottom_left
    return (horiz + vert + m) >> shift


def _predict_dc(refs: ReferenceSamples) -> np.ndarray:
    m = refs.m
    total = int(refs.above[1 : m + 1].sum() + refs.left[:m].sum())
    dc = (total + m) >> (int(np.log2(m)) + 1)
    return np.full((m, m), dc, dtype=np.int64)


def _mode_gather(m: int, mode: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gather tables turning the canonical reference vector into one mode.

    The canonical vector is above (2m+1 values, corner first) followed
    by left (2m values).  Returns (full_idx, j1, fact): the extended
    main reference is canon[full_idx], and the prediction is the two-tap
    blend of full[j1] and full[j1 + 1] with weight fact/32.
    """
    angle = _ANGLES[mode]
    above_idx = np.arange(2 * m + 1)
    left_with_corner = np.concatenate([[0], 2 * m + 1 + np.arange(2 * m)])
    if mode >= 18:
        main, side = above_idx, left_with_corner
    else:
        main, side = left_with_corner, above_idx
    if angle >= 0:
        full_idx = np.concatenate([main, main[-1:]])  # sentinel for the fact=0 tap
        off = 0
    else:
        ext_lo = ((m * angle) >> 5) + 1  # deepest index the interpolation can touch
        xs = np.arange(ext_lo, 0)
        side_idx = (xs * _INV_ANGLES[angle] + 128) >> 8
        full_idx = np.concatenate([side[side_idx], main, main[-1:]])
        off = -ext_lo
    d = np.arange(1, m + 1)
    idx = (d * angle) >> 5
    fact = (d * angle) & 31
    pos = np.arange(m)
    if mode >= 18:  # rows driven by y
        j1 = off + pos[None, :] + idx[:, None] + 1
        f = np.broadcast_to(fact[:, None], (m, m))
    else:  # columns driven by x
        j1 = off + pos[:, None] + idx[None, :] + 1
        f = np.broadcast_to(fact[None, :], (m, m))
    return full_idx, j1, f


@lru_cache(maxsize=None)
def _angular_tables(m: int):
    """Stacked gather tables for the 33 angular modes at one block size."""
    per_mode = [_mode_gather(m, mode) for mode in range(2, N_MODES)]
    longest = max(t[0].size for t in per_mode)
    full_idx = np.zeros((33, longest), dtype=np.int64)
    j1 = np.empty((33, m, m), dtype=np.int64)
    fact = np.empty((33, m, m), dtype=np.int64)
    for i, (fi, j, f) in enumerate(per_mode):
        full_idx[i, : fi.size] = fi
        full_idx[i, fi.size :] = fi[-1]
        j1[i] = j
        fact[i] = f
    return full_idx, j1, fact


def _canonical_refs(refs: ReferenceSamples) -> np.ndarray:
    return np.concatenate([refs.above, refs.left])


def _predict_angular(refs: ReferenceSamples, mode: int) -> np.ndarray:
    full_idx, j1, f = _mode_gather(refs.m, mode)
    full = _canonical_refs(refs)[full_idx]
    return ((32 - f) * full[j1] + f * full[j1 + 1] + 16) >> 5


def predict_mode(refs: ReferenceSamples, mode: int, m: int | None = None) -> np.ndarray:
    """Prediction of one mode as an (m, m) integer block."""
    if m is not None and m != refs.m:
        raise InvalidArgument(f"references built for m={refs.m}, requested m={m}")
    if mode == MODE_PLANAR:
        return _predict_planar(refs)
    if mode == MODE_DC:
        return _predict_dc(refs)
    if 2 <= mode < N_MODES:
        return _predict_angular(refs, mode)
    raise InvalidArgument(f"invalid mode index {mode}")


_MODE_AXIS = np.arange(33)[:, None, None]


def predict_all_modes(refs: ReferenceSamples) -> np.ndarray:
    """All 35 predictions stacked as (35, m, m)."""
    m = refs.m
    out = np.empty((N_MODES, m, m), dtype=np.int64)
    out[MODE_PLANAR] = _predict_planar(refs)
    out[MODE_DC] = _predict_dc(refs)
    full_idx, j1, f = _angular_tables(m)
    full = _canonical_refs(refs)[full_idx]  # (33, longest)
    t1 = full[_MODE_AXIS, j1]
    t2 = full[_MODE_AXIS, j1 + 1]
    out[2:] = ((32 - f) * t1 + f * t2 + 16) >> 5
    return out


def fast_mode_list(
    block: np.ndarray,
    refs: ReferenceSamples,
    lam_fast: float,
    list_size: int,
    signal_bits: dict[int, int] | None = None,
    predictions: np.ndarray | None = None,
    candidates: Sequence[int] | None = None,
) -> list[int]:
    """Shortlist modes by SAD plus weighted signalling cost.

    Returns the `list_size` cheapest candidate modes, cheapest first,
    ties broken toward the lower mode index.
    """
    if list_size < 1:
        raise InvalidArgument("list size must be at least 1")
    preds = predictions if predictions is not None else predict_all_modes(refs)
    diffs = np.abs(preds.astype(np.float64) - np.asarray(block, dtype=np.float64)[None])
    costs = diffs.sum(axis=(1, 2))
    if signal_bits is not None:
        costs = costs + lam_fast * np.array([signal_bits[k] for k in range(N_MODES)])
    if candidates is not None:
        keep = np.zeros(N_MODES, dtype=bool)
        keep[list(candidates)] = True
        costs = np.where(keep, costs, np.inf)
        list_size = min(list_size, int(keep.sum()))
    order = np.lexsort((np.arange(N_MODES), costs))
    return [int(k) for k in order[:list_size]]


def rd_candidate_order(candidates: Sequence[int]) -> list[int]:
    """Deterministic RD evaluation order: the learned mode first, then ascending."""
    return sorted(set(candidates), key=lambda k: (-1, 0) if k == PNNS_MODE else (0, k))


def select_mode_rd(
    candidates: Sequence[int],
    trial: Callable[[int], tuple[float, int]],
    lam_rd: float,
):
    """Pick the candidate minimizing D + lambda * R.

    `trial(mode)` runs the full residual encode and returns (distortion,
    exact bit count).  Ties keep the earlier candidate in the
    deterministic order (learned mode before mode 0, then by index).
    """
    if not candidates:
        raise InvalidArgument("candidate list is empty")
    best_mode, best_cost = None, np.inf
    for mode in rd_candidate_order(candidates):
        dist, bits = trial(mode)
        cost = dist + lam_rd * bits
        if cost < best_cost:
            best_mode, best_cost = mode, cost
    return best_mode, best_cost


def best_mode_psnr(block: np.ndarray, refs: ReferenceSamples) -> tuple[int, float]:
    """Exhaustive search for the best of the 35 modes by prediction PSNR."""
    preds = predict_all_modes(refs)
    best_mode, best = 0, -1.0
    for mode in range(N_MODES):
        value = psnr(block, preds[mode])
        if value > best:
            best_mode, best = mode, value
    return best_mode, best


def lambda_rd(qp: int) -> float:
    """HM-style rate-distortion multiplier."""
    return 0.85 * 2.0 ** ((qp - 12) / 3.0)


def lambda_fast(qp: int) -> float:
    return float(np.sqrt(lambda_rd(qp)))


def fast_list_size(m: int) -> int:
    """Shortlist length fed to the RD stage (HM-style defaults)."""
    return 8 if m <= 8 else 3
