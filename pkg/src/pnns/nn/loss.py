"""Training objective: distortion norm plus L2 weight penalty.

The distortion is the unsquared norm of the residual (L2 by default, L1
as a variant); the penalty applies to weight tensors only, never biases.
At a zero residual the (non-differentiable) norm gradient is defined as 0.
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument

DISTORTION_L2 = "l2"
DISTORTION_L1 = "l1"


def distortion_and_grad(prediction: np.ndarray, target: np.ndarray, distortion: str):
    """Unsquared residual norm and its gradient w.r.t. the prediction."""
    p = np.asarray(prediction, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise InvalidArgument(f"prediction shape {p.shape} != target shape {t.shape}")
    r = p - t
    if distortion == DISTORTION_L2:
        norm = float(np.sqrt((r * r).sum()))
        grad = r / norm if norm > 0.0 else np.zeros_like(r)
    elif distortion == DISTORTION_L1:
        norm = float(np.abs(r).sum())
        grad = np.sign(r)
    else:
        raise InvalidArgument(f"unknown distortion {distortion!r}")
    return norm, grad


def weight_penalty(weights: list[np.ndarray], lam: float):
    """lam * sum of squared L2 norms of the weight tensors, with gradients."""
    value = lam * sum(float((w * w).sum()) for w in weights)
    grads = [2.0 * lam * w for w in weights]
    return value, grads


def loss_and_grad(
    prediction: np.ndarray,
    target: np.ndarray,
    distortion: str,
    weights: list[np.ndarray],
    lam: float,
):
    """Full objective value with gradients for the prediction and each weight."""
    if lam < 0.0:
        raise InvalidArgument("weight decay must be non-negative")
    norm, dpred = distortion_and_grad(prediction, target, distortion)
    penalty, dweights = weight_penalty(weights, lam)
    return norm + penalty, dpred, dweights
