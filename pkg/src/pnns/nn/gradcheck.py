"""Central finite-difference gradient verification.

Used by the test suite and the CLI self check.  Works on any scalar
function of flat numpy arrays; tolerances assume float64 throughout.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

DEFAULT_STEP = 1e-6


def numerical_gradient(
    fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = DEFAULT_STEP
) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(x)
        flat[i] = orig - step
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Elementwise |a - n| / max(|a|, |n|, floor), reduced with max.

    The floor keeps near-zero gradient entries from blowing up the
    relative measure; absolute agreement still has to hold there.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())
