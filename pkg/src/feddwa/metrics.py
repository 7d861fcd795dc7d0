"""Pixel-wise IoU, confusion counts and per-round reports."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError
from .losses import cross_entropy
from .nn import forward

SCOPE_GLOBAL = "global"
SCOPE_LOCAL = "local"


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def zeros(cls, K: int) -> "ConfusionCounts":
        z = np.zeros(K, dtype=np.int64)
        return cls(z.copy(), z.copy(), z.copy())

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def predict_mask(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties.
    return np.argmax(logits, axis=-1)


def confusion(pred_mask: np.ndarray, true_mask: np.ndarray, K: int) -> ConfusionCounts:
    pred_mask = np.asarray(pred_mask)
    true_mask = np.asarray(true_mask)
    if pred_mask.shape != true_mask.shape:
        raise InvalidInputError(f"confusion: shape mismatch {pred_mask.shape} vs {true_mask.shape}")
    for name, m in (("pred", pred_mask), ("true", true_mask)):
        if m.size and (m.min() < 0 or m.max() >= K):
            raise InvalidInputError(f"confusion: {name} mask has indices outside 0..{K - 1}")
    table = np.bincount(true_mask.ravel() * K + pred_mask.ravel(), minlength=K * K).reshape(K, K)
    tp = np.diag(table).astype(np.int64)
    return ConfusionCounts(tp, table.sum(axis=0) - tp, table.sum(axis=1) - tp)


def iou(counts: ConfusionCounts) -> tuple[np.ndarray, float]:
    """Per-class IoU and its mean over classes that occur.

    Classes with TP + FP + FN == 0 get NaN and are left out of the mean. The
    mean is NaN only if no class occurs at all.
    """
    denom = counts.tp + counts.fp + counts.fn
    per_class = np.full(denom.shape, np.nan)
    present = denom > 0
    per_class[present] = counts.tp[present] / denom[present]
    mean = float(per_class[present].mean()) if present.any() else float("nan")
    return per_class, mean


@dataclass(frozen=True)
class RoundReport:
    round: int
    client_id: int
    scope: str
    loss: float
    iou_per_class: tuple[float, ...]
    mean_iou: float


def rounds_to_peak(reports: Sequence[RoundReport] | Sequence[float]) -> tuple[float, int]:
    """Best mean IoU and the first round reaching it.

    Accepts reports (uses ``report.round``) or a bare IoU sequence, whose
    rounds are numbered from 1.
    """
    if len(reports) == 0:
        raise InvalidInputError("rounds_to_peak: empty report list")
    if isinstance(reports[0], RoundReport):
        pairs = [(r.round, r.mean_iou) for r in reports]
    else:
        pairs = [(i + 1, float(v)) for i, v in enumerate(reports)]
    best_round, best = None, -np.inf
    for rnd, value in sorted(pairs, key=lambda p: p[0]):
        if value > best:
            best_round, best = rnd, value
    if best_round is None:
        return float("nan"), pairs[0][0]
    return float(best), int(best_round)


def evaluate(model, samples: Iterable, K: int) -> tuple[float, ConfusionCounts]:
    """Mean cross-entropy and pooled confusion counts of ``model`` on ``samples``."""
    total, n = 0.0, 0
    counts = ConfusionCounts.zeros(K)
    for s in samples:
        logits = forward(model, s.input)
        loss, _ = cross_entropy(logits, s.mask)
        total += loss
        n += 1
        counts = counts + confusion(predict_mask(logits), s.mask, K)
    return (total / n if n else float("nan")), counts
