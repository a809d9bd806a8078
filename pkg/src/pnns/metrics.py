"""Distortion metrics used across prediction and coding."""

from __future__ import annotations

import numpy as np

PSNR_CAP_DB = 100.0  # reported in place of +inf when the MSE is zero


def sad(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)).sum())


def sse(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float((d * d).sum())


def psnr(reference: np.ndarray, test: np.ndarray, peak: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at :data:`PSNR_CAP_DB`."""
    mse = sse(reference, test) / np.asarray(reference).size
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))
