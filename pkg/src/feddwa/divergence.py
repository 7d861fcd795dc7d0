"""Per-pixel predictive distributions and the KL divergence used for weighting.

Every grid here has shape ``(..., K)``: leading axes index pixels (and
optionally samples), the trailing axis indexes classes.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import InvalidInputError

# Local log-probabilities are floored here before entering the divergence so a
# class that the local model rules out cannot produce an infinite term.
LOG_PROB_FLOOR = math.log(1e-12)

# Reduction over pixels; "sum" is kept for sensitivity studies.
KLD_REDUCTIONS = ("mean", "sum")
DEFAULT_KLD_REDUCTION = "mean"


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax over the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise InvalidInputError("log_softmax: logits contain NaN or Inf")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_pair(p_global: np.ndarray, p_local: np.ndarray) -> None:
    if p_global.shape != p_local.shape:
        raise InvalidInputError(f"kld: shape mismatch {p_global.shape} vs {p_local.shape}")
    if p_global.ndim < 1 or p_global.shape[-1] < 1:
        raise InvalidInputError("kld: grids need a non-empty class axis")


def _reduce(per_pixel: np.ndarray, reduction: str) -> float:
    if reduction == "mean":
        return float(per_pixel.mean())
    if reduction == "sum":
        return float(per_pixel.sum())
    raise InvalidInputError(f"unknown kld reduction {reduction!r}; expected one of {KLD_REDUCTIONS}")


def kld(p_global: np.ndarray, p_local: np.ndarray, reduction: str = DEFAULT_KLD_REDUCTION) -> float:
    """KL(global || local) between two log-probability grids.

    The previous-round global prediction is the reference distribution. Each
    pixel contributes ``sum_k exp(g_k) * (g_k - max(l_k, LOG_PROB_FLOOR))``;
    pixels are averaged (``reduction="mean"``) or summed.
    """
    p_global = np.asarray(p_global, dtype=np.float64)
    p_local = np.asarray(p_local, dtype=np.float64)
    _check_pair(p_global, p_local)
    clamped = np.maximum(p_local, LOG_PROB_FLOOR)
    per_pixel = np.sum(np.exp(p_global) * (p_global - clamped), axis=-1)
    # Floor clamping can push a pixel below zero by at most ~K*1e-12.
    per_pixel = np.maximum(per_pixel, 0.0)
    return _reduce(per_pixel, reduction)


def kld_grad_logits(p_global: np.ndarray, local_logits: np.ndarray,
                    reduction: str = DEFAULT_KLD_REDUCTION) -> np.ndarray:
    """Gradient of :func:`kld` with respect to the local logits.

    Only used by the variant of DALoss that differentiates through the
    divergence. Floored entries carry no gradient.
    """
    p_global = np.asarray(p_global, dtype=np.float64)
    local_logits = np.asarray(local_logits, dtype=np.float64)
    _check_pair(p_global, local_logits)
    local = log_softmax(local_logits)
    soft = np.exp(local)
    weight = np.exp(p_global) * (local > LOG_PROB_FLOOR)
    # d/dz_j of -sum_k a_k log s_k  =  s_j * sum_k a_k - a_j
    grad = soft * weight.sum(axis=-1, keepdims=True) - weight
    # Pixels clipped to zero in kld() are those with a negative raw value,
    # which only happens inside the floor's rounding band; ignore that case.
    if reduction == "mean":
        n_pixels = int(np.prod(p_global.shape[:-1])) or 1
        return grad / n_pixels
    if reduction == "sum":
        return grad
    raise InvalidInputError(f"unknown kld reduction {reduction!r}; expected one of {KLD_REDUCTIONS}")


def accumulate_o_m(global_preds: Sequence[np.ndarray], local_preds: Sequence[np.ndarray],
                   reduction: str = DEFAULT_KLD_REDUCTION) -> float:
    """Sum of per-sample divergences between global and local predictions."""
    if len(global_preds) != len(local_preds):
        raise InvalidInputError(
            f"accumulate_o_m: {len(global_preds)} global vs {len(local_preds)} local predictions")
    total = 0.0
    for pg, pl in zip(global_preds, local_preds):
        total += kld(pg, pl, reduction)
    return total
