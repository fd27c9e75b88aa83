"""Class-balanced saliency cross-entropy and the Euclidean label loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from weaksal.errors import DimensionMismatch
from weaksal.imagecore import BinaryMask, SaliencyMap

LOG_CLAMP = 1e-7


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    beta_i: float
    n_pos: int
    n_neg: int
    n_total: int


def _balance(g: np.ndarray) -> tuple[float, int, int]:
    n_pos = int(g.sum())
    n_neg = g.size - n_pos
    return n_neg / g.size, n_pos, n_neg


def saliency_loss(pred_prob: SaliencyMap, g: BinaryMask) -> LossBreakdown:
    """-beta * sum_pos log p - (1 - beta) * sum_neg log(1 - p), beta = n_neg / n."""
    if pred_prob.shape != g.shape:
        raise DimensionMismatch(f"prediction {pred_prob.shape} vs target {g.shape}")
    p = np.clip(pred_prob.values, LOG_CLAMP, 1.0 - LOG_CLAMP)
    pos = g.values.astype(bool)
    beta, n_pos, n_neg = _balance(pos)
    total = -beta * np.log(p[pos]).sum() - (1.0 - beta) * np.log(1.0 - p[~pos]).sum()
    return LossBreakdown(float(total), beta, n_pos, n_neg, pos.size)


def saliency_loss_grad_logit(pred_prob: SaliencyMap, g: BinaryMask) -> np.ndarray:
    """d(saliency_loss)/d(logit) where pred_prob = sigmoid(logit).

    Pixels whose probability sits in the log clamp get zero gradient, which
    is the exact derivative of the clamped loss.
    """
    p = pred_prob.values
    pos = g.values.astype(bool)
    beta, _, _ = _balance(pos)
    live = (p > LOG_CLAMP) & (p < 1.0 - LOG_CLAMP)
    grad = np.where(pos, -beta * (1.0 - p), (1.0 - beta) * p)
    return grad * live


def label_target(labels, n_classes: int) -> np.ndarray:
    """Multi-hot vector divided by the number of labels."""
    t = np.zeros(n_classes)
    labels = sorted(set(labels))
    if not labels:
        raise ValueError("need at least one label")
    t[labels] = 1.0 / len(labels)
    return t


def classification_loss(scores, target) -> float:
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if s.shape != t.shape:
        raise DimensionMismatch(f"{s.shape[0] if s.ndim else 0} scores vs {t.shape[0] if t.ndim else 0} targets")
    return 0.5 * float(((s - t) ** 2).sum())


def classification_loss_grad(scores, target) -> np.ndarray:
    return np.asarray(scores, dtype=np.float64) - np.asarray(target, dtype=np.float64)
