"""Cross-entropy and the divergence-scaled proximal loss (DALoss).

``cross_entropy`` and ``daloss`` work on logit grids; the objective classes at
the bottom bundle the per-sample context so :func:`feddwa.nn.value_and_grad`
can evaluate either loss without knowing which one it has.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import divergence
from .errors import InvalidInputError


@dataclass(frozen=True)
class DALossConfig:
    C: float = 0.1
    kld_detached: bool = True
    enabled: bool = True

    def __post_init__(self):
        if not (self.C >= 0.0) or not np.isfinite(self.C):
            raise InvalidInputError(f"DALossConfig.C must be a finite value >= 0, got {self.C}")


def _check_mask(mask: np.ndarray, n_classes: int) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.issubdtype(mask.dtype, np.integer):
        raise InvalidInputError(f"mask must hold integer class indices, got dtype {mask.dtype}")
    if mask.size and (mask.min() < 0 or mask.max() >= n_classes):
        raise InvalidInputError(f"mask has class indices outside 0..{n_classes - 1}")
    return mask


def cross_entropy(logits: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-pixel cross-entropy and its gradient with respect to ``logits``.

    ``logits`` has shape ``mask.shape + (K,)``. The gradient is
    ``(softmax - onehot) / n_pixels``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[:-1] != np.shape(mask):
        raise InvalidInputError(f"cross_entropy: logits {logits.shape} do not match mask {np.shape(mask)}")
    n_classes = logits.shape[-1]
    mask = _check_mask(mask, n_classes)
    logp = divergence.log_softmax(logits)
    flat_logp = logp.reshape(-1, n_classes)
    flat_mask = mask.reshape(-1)
    n_pixels = flat_mask.size
    rows = np.arange(n_pixels)
    loss = -float(flat_logp[rows, flat_mask].mean())
    grad = np.exp(flat_logp)
    grad[rows, flat_mask] -= 1.0
    grad /= n_pixels
    return loss, grad.reshape(logits.shape)


def daloss(logits: np.ndarray, mask: np.ndarray, kld_value: float,
           g_global_prev: np.ndarray, g_local: np.ndarray, cfg: DALossConfig,
           kld_grad: np.ndarray | None = None) -> tuple[float, np.ndarray, np.ndarray]:
    """Cross-entropy plus ``C * kld_value * ||g_global_prev - g_local||^2``.

    Returns ``(loss, dloss/dlogits, dloss/dparams_extra)``. The divergence is a
    detached weight by default; pass ``kld_grad`` (the divergence's gradient
    with respect to the logits) together with ``cfg.kld_detached=False`` to
    also differentiate through it.
    """
    g_global_prev = np.asarray(g_global_prev, dtype=np.float64)
    g_local = np.asarray(g_local, dtype=np.float64)
    if g_global_prev.shape != g_local.shape:
        raise InvalidInputError(
            f"daloss: parameter length mismatch {g_global_prev.shape} vs {g_local.shape}")
    if not kld_value >= 0.0:
        raise InvalidInputError(f"daloss: kld_value must be >= 0, got {kld_value}")

    ce, dlogits = cross_entropy(logits, mask)
    diff = g_local - g_global_prev
    dist_sq = float(diff @ diff)
    weight = cfg.C * kld_value
    loss = ce + weight * dist_sq
    extra = (2.0 * weight) * diff
    if not cfg.kld_detached and kld_grad is not None and cfg.C != 0.0:
        dlogits = dlogits + (cfg.C * dist_sq) * kld_grad
    return loss, dlogits, extra


class LossTerms(NamedTuple):
    loss: float
    dlogits: np.ndarray
    dparams: np.ndarray | None
    kld: float | None


class CrossEntropyObjective:
    """Plain per-sample cross-entropy."""

    def evaluate(self, logits: np.ndarray, mask: np.ndarray, params: np.ndarray) -> LossTerms:
        loss, dlogits = cross_entropy(logits, mask)
        return LossTerms(loss, dlogits, None, None)


@dataclass(frozen=True)
class DALossObjective:
    """DALoss bound to one sample's frozen global prediction.

    ``global_logp`` is the previous-round global model's log-probability grid
    for the sample; ``global_params`` is that model's flat parameter vector.
    """

    cfg: DALossConfig
    global_logp: np.ndarray
    global_params: np.ndarray
    reduction: str = divergence.DEFAULT_KLD_REDUCTION

    def evaluate(self, logits: np.ndarray, mask: np.ndarray, params: np.ndarray) -> LossTerms:
        local_logp = divergence.log_softmax(logits)
        k = divergence.kld(self.global_logp, local_logp, self.reduction)
        kgrad = None
        if not self.cfg.kld_detached:
            kgrad = divergence.kld_grad_logits(self.global_logp, logits, self.reduction)
        loss, dlogits, extra = daloss(logits, mask, k, self.global_params, params, self.cfg, kgrad)
        return LossTerms(loss, dlogits, extra, k)
