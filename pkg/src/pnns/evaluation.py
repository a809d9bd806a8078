"""Experiment harness: prediction-PSNR matrices, success rates, Bjontegaard
rate savings, RD sweeps, robustness comparisons, and timing ratios.

Everything aggregates deterministically in input order, and every CSV
written here carries enough per-sample or per-point data to replay the
aggregates exactly.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import codec as codec_mod
from . import hevc
from .context import BlockSample, ContextPair, apply_masks, valid_block_positions
from .errors import FitError, InvalidArgument
from .metrics import psnr
from .models import Network, predict_block
from .training import CropSet

# QP ranges used for the rate sweeps
QP_LOW_RATE = (32, 34, 37, 39, 42)
QP_HIGH_RATE = (17, 19, 22, 24, 27)
QP_ALL_RATES = tuple(range(17, 43))
QP_COMMON = (22, 27, 32, 37)


class RdPoint(NamedTuple):
    rate: float  # bits per pixel
    psnr: float  # dB


@dataclass
class EvalSample:
    """One block with its unmasked context and its reference neighborhood."""

    m: int
    position: tuple[int, int]
    x0_raw: np.ndarray
    x1_raw: np.ndarray
    target: np.ndarray
    refs: hevc.ReferenceSamples

    def context(self, n0: int, n1: int, alpha: float) -> ContextPair:
        x0 = self.x0_raw.copy()
        x1 = self.x1_raw.copy()
        apply_masks(x0, x1, n0, n1, alpha, self.m)
        return ContextPair(m=self.m, x0=x0, x1=x1, n0=n0, n1=n1, alpha=alpha)

    def as_block_sample(self, n0: int, n1: int, alpha: float) -> BlockSample:
        return BlockSample(context=self.context(n0, n1, alpha), target=self.target)


def build_eval_samples(
    images: Sequence[np.ndarray],
    m: int,
    count: int,
    rng: np.random.Generator,
) -> list[EvalSample]:
    """Blocks at random positions whose full context fits inside the image."""
    usable = [np.asarray(img) for img in images if min(img.shape) >= 3 * m]
    if not usable:
        raise InvalidArgument(f"no image can host the 3mx3m footprint for m={m}")
    samples = []
    for _ in range(count):
        img = usable[int(rng.integers(len(usable)))]
        rows, cols = valid_block_positions(*img.shape, m)
        r = int(rng.integers(rows.start, rows.stop))
        c = int(rng.integers(cols.start, cols.stop))
        x0 = img[r : r + 2 * m, c - m : c].astype(np.float64)
        x1 = img[r - m : r, c - m : c + 2 * m].astype(np.float64)
        target = img[r : r + m, c : c + m].astype(np.float64)
        refs = hevc.build_reference_samples(img, (r, c), m)
        samples.append(
            EvalSample(m=m, position=(r, c), x0_raw=x0, x1_raw=x1, target=target, refs=refs)
        )
    return samples


# ---------------------------------------------------------------------------
# prediction quality


@dataclass
class MaskMatrix:
    """Rows are test (n0, n1) pairs, columns are model labels."""

    rows: list[tuple[int, int]]
    columns: list[str]
    cells: np.ndarray  # (rows, columns) mean values
    sample_count: int
    per_sample: dict[tuple[int, int], dict[str, np.ndarray]] = field(default_factory=dict)


def prediction_psnr_suite(
    networks: dict[str, Network],
    samples: list[EvalSample],
    mask_grid: list[tuple[int, int]],
) -> MaskMatrix:
    """Mean prediction PSNR for every (test mask, model) cell."""
    if not samples:
        raise InvalidArgument("empty sample set")
    labels = list(networks)
    cells = np.zeros((len(mask_grid), len(labels)))
    per_sample: dict[tuple[int, int], dict[str, np.ndarray]] = {}
    for i, (n0, n1) in enumerate(mask_grid):
        per_sample[(n0, n1)] = {}
        for j, label in enumerate(labels):
            net = networks[label]
            values = np.array(
                [
                    psnr(s.target, predict_block(net, s.context(n0, n1, net.alpha)))
                    for s in samples
                ]
            )
            per_sample[(n0, n1)][label] = values
            cells[i, j] = values.mean()
    return MaskMatrix(
        rows=list(mask_grid),
        columns=labels,
        cells=cells,
        sample_count=len(samples),
        per_sample=per_sample,
    )


def success_rate_mu(
    net: Network, samples: list[EvalSample], n0: int = 0, n1: int = 0
) -> float:
    """Fraction of blocks where the learned prediction strictly beats all 35 modes."""
    wins = 0
    for s in samples:
        learned = psnr(s.target, predict_block(net, s.context(n0, n1, net.alpha)))
        _, best = hevc.best_mode_psnr(s.target, s.refs)
        if learned > best:
            wins += 1
    return wins / len(samples)


def best_mode_mean_psnr(samples: list[EvalSample]) -> float:
    return float(np.mean([hevc.best_mode_psnr(s.target, s.refs)[1] for s in samples]))


def single_mode_mean_psnr(samples: list[EvalSample], mode: int) -> float:
    return float(
        np.mean([psnr(s.target, hevc.predict_mode(s.refs, mode)) for s in samples])
    )


# ---------------------------------------------------------------------------
# Bjontegaard rate saving


def _fit_log_rate(points: Sequence[RdPoint]) -> np.ndarray:
    """Coefficients (ascending powers) of a cubic log10(rate) over PSNR."""
    if len(points) < 4:
        raise FitError("need at least 4 rate-distortion points")
    rates = np.array([p[0] for p in points], dtype=np.float64)
    psnrs = np.array([p[1] for p in points], dtype=np.float64)
    if (rates <= 0).any():
        raise FitError("rates must be positive")
    if len(np.unique(psnrs)) < 4:
        raise FitError("degenerate fit: fewer than 4 distinct PSNR values")
    vand = np.vander(psnrs, 4, increasing=True)
    coeffs, _, rank, _ = np.linalg.lstsq(vand, np.log10(rates), rcond=None)
    if rank < 4:
        raise FitError("degenerate fit: singular Vandermonde system")
    return coeffs


def _integrate_poly(coeffs: np.ndarray, lo: float, hi: float) -> float:
    powers = np.arange(1, coeffs.size + 1)
    anti = coeffs / powers
    return float((anti * hi**powers).sum() - (anti * lo**powers).sum())


def bjontegaard(curve_a: Sequence[RdPoint], curve_b: Sequence[RdPoint]) -> float:
    """Average bitrate difference of curve A against curve B, in percent.

    Cubic fits of log10(rate) as a function of PSNR are integrated over
    the overlapping PSNR interval; negative values mean A saves bitrate.
    """
    fit_a = _fit_log_rate(curve_a)
    fit_b = _fit_log_rate(curve_b)
    lo = max(min(p[1] for p in curve_a), min(p[1] for p in curve_b))
    hi = min(max(p[1] for p in curve_a), max(p[1] for p in curve_b))
    if hi <= lo:
        raise FitError("PSNR ranges do not overlap")
    avg_diff = (_integrate_poly(fit_a, lo, hi) - _integrate_poly(fit_b, lo, hi)) / (hi - lo)
    return 100.0 * (10.0**avg_diff - 1.0)


# ---------------------------------------------------------------------------
# rate-distortion sweeps


@dataclass
class SweepResult:
    qps: tuple[int, ...]
    scheme_a: str
    scheme_b: str
    curves: dict[str, dict[str, list[RdPoint]]]  # image -> scheme -> points
    bd_percent: dict[str, float]  # image -> bjontegaard(A vs B)
    stats: dict[str, dict[str, list[codec_mod.EncodeStats]]]
    encode_seconds: dict[str, dict[str, float]]
    decode_seconds: dict[str, dict[str, float]]


def _encode_curve(
    image: np.ndarray,
    qps: Sequence[int],
    scheme: str,
    predictors: codec_mod.PredictorSet | None,
) -> tuple[list[RdPoint], list[codec_mod.EncodeStats], float, float]:
    points, all_stats = [], []
    enc_time = dec_time = 0.0
    for qp in qps:
        t0 = time.perf_counter()
        data, recon, stats = codec_mod.encode_image(image, qp, scheme, predictors)
        t1 = time.perf_counter()
        decoded = codec_mod.decode_image(data, predictors)
        t2 = time.perf_counter()
        if not np.array_equal(decoded, recon):
            raise AssertionError("decoder disagrees with encoder reconstruction")
        enc_time += t1 - t0
        dec_time += t2 - t1
        points.append(RdPoint(rate=stats.bpp, psnr=stats.psnr_db))
        all_stats.append(stats)
    return points, all_stats, enc_time, dec_time


def rd_sweep(
    images: dict[str, np.ndarray],
    qps: Sequence[int],
    scheme_a: str,
    scheme_b: str,
    predictors_a: codec_mod.PredictorSet | None = None,
    predictors_b: codec_mod.PredictorSet | None = None,
) -> SweepResult:
    """Encode every image at every QP under both schemes and compare.

    The Bjontegaard number per image is scheme A against scheme B;
    negative means A saves rate.
    """
    if len(qps) < 4:
        raise InvalidArgument("need at least 4 QPs for the cubic fit")
    curves: dict[str, dict[str, list[RdPoint]]] = {}
    bd: dict[str, float] = {}
    stats: dict[str, dict[str, list[codec_mod.EncodeStats]]] = {}
    enc_s: dict[str, dict[str, float]] = {}
    dec_s: dict[str, dict[str, float]] = {}
    for name, image in images.items():
        pa, sa, ea, da = _encode_curve(image, qps, scheme_a, predictors_a)
        pb, sb, eb, db = _encode_curve(image, qps, scheme_b, predictors_b)
        curves[name] = {scheme_a: pa, scheme_b: pb}
        stats[name] = {scheme_a: sa, scheme_b: sb}
        enc_s[name] = {scheme_a: ea, scheme_b: eb}
        dec_s[name] = {scheme_a: da, scheme_b: db}
        bd[name] = bjontegaard(pa, pb)
    return SweepResult(
        qps=tuple(qps),
        scheme_a=scheme_a,
        scheme_b=scheme_b,
        curves=curves,
        bd_percent=bd,
        stats=stats,
        encode_seconds=enc_s,
        decode_seconds=dec_s,
    )


def noise_robustness_compare(
    clean_predictors: codec_mod.PredictorSet,
    noise_predictors: codec_mod.PredictorSet,
    images: dict[str, np.ndarray],
    qps: Sequence[int],
    scheme: str = codec_mod.SCHEME_SWITCH,
) -> dict:
    """Gains of clean-trained vs noise-trained predictor sets over the baseline.

    Returns per-image gains for both variants, their difference, and the
    direct pairwise Bjontegaard between the two learned variants.
    """
    clean = rd_sweep(images, qps, scheme, codec_mod.SCHEME_BASELINE, clean_predictors, None)
    noisy = rd_sweep(images, qps, scheme, codec_mod.SCHEME_BASELINE, noise_predictors, None)
    report = {"images": {}, "qps": tuple(qps), "scheme": scheme}
    for name in images:
        pair = bjontegaard(clean.curves[name][scheme], noisy.curves[name][scheme])
        report["images"][name] = {
            "clean_gain_percent": clean.bd_percent[name],
            "noise_gain_percent": noisy.bd_percent[name],
            "delta_percent": clean.bd_percent[name] - noisy.bd_percent[name],
            "pairwise_percent": pair,
            "clean_curve": clean.curves[name][scheme],
            "noise_curve": noisy.curves[name][scheme],
        }
    return report


def timing_report(
    image: np.ndarray,
    qp: int,
    predictors: codec_mod.PredictorSet,
    scheme: str = codec_mod.SCHEME_SWITCH,
    runs: int = 3,
) -> dict:
    """Wall-clock encode/decode ratios of a learned scheme vs the baseline."""
    if runs < 3:
        raise InvalidArgument("need at least 3 runs per configuration")

    def measure(sch, preds):
        enc, dec = [], []
        for _ in range(runs):
            t0 = time.perf_counter()
            data, _, _ = codec_mod.encode_image(image, qp, sch, preds)
            t1 = time.perf_counter()
            codec_mod.decode_image(data, preds)
            t2 = time.perf_counter()
            enc.append(t1 - t0)
            dec.append(t2 - t1)
        return np.array(enc), np.array(dec)

    enc_b, dec_b = measure(codec_mod.SCHEME_BASELINE, None)
    enc_s, dec_s = measure(scheme, predictors)
    ratios_enc = enc_s / enc_b.mean()
    ratios_dec = dec_s / dec_b.mean()
    return {
        "encode_ratio_mean": float(ratios_enc.mean()),
        "encode_ratio_std": float(ratios_enc.std()),
        "decode_ratio_mean": float(ratios_dec.mean()),
        "decode_ratio_std": float(ratios_dec.std()),
        "baseline_encode_seconds": float(enc_b.mean()),
        "baseline_decode_seconds": float(dec_b.mean()),
    }


# ---------------------------------------------------------------------------
# CSV emission


def write_mask_matrix(path: str, matrix: MaskMatrix) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n0", "n1", "samples", *matrix.columns])
        for i, (n0, n1) in enumerate(matrix.rows):
            writer.writerow([n0, n1, matrix.sample_count, *[f"{v:.6f}" for v in matrix.cells[i]]])


def write_rd_curves(path: str, sweep: SweepResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "scheme", "qp", "rate_bpp", "psnr_db"])
        for name, per_scheme in sweep.curves.items():
            for scheme, points in per_scheme.items():
                for qp, point in zip(sweep.qps, points):
                    writer.writerow([name, scheme, qp, f"{point.rate:.8f}", f"{point.psnr:.6f}"])


def write_bd_summary(path: str, sweep: SweepResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "scheme_a", "scheme_b", "bd_rate_percent"])
        for name, value in sweep.bd_percent.items():
            writer.writerow([name, sweep.scheme_a, sweep.scheme_b, f"{value:.6f}"])


def write_nu_table(path: str, nu: dict[int, dict[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block_width", "mode", "frequency"])
        for m in sorted(nu):
            for mode, freq in sorted(nu[m].items()):
                writer.writerow([m, mode, f"{freq:.8f}"])


def read_rd_curve_csv(path: str) -> dict[str, dict[str, list[RdPoint]]]:
    out: dict[str, dict[str, list[RdPoint]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["image"], {}).setdefault(row["scheme"], []).append(
                RdPoint(rate=float(row["rate_bpp"]), psnr=float(row["psnr_db"]))
            )
    return out
