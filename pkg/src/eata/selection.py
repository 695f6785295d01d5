"""Sample-adaptive weights: entropy gate times diversity gate, plus the EMA tracker.

Predictions compared by cosine and averaged into the tracker are softmax
probabilities. The tracker is fed the mean prediction of the samples that
pass both gates in a batch, and is left untouched when none pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericDomainError
from .numerics import cosine, cosine_rows, entropy_from_logits, exact_column_mean, softmax


@dataclass(frozen=True)
class SelectionConfig:
    e0: float
    epsilon: float = 0.4
    alpha: float = 0.1

    def __post_init__(self):
        if not self.e0 > 0:
            raise ContractError("e0 must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError("alpha must lie in [0, 1]")
        if not 0.0 < self.epsilon <= 1.0:
            raise ContractError("epsilon must lie in (0, 1]")

    @classmethod
    def for_classes(cls, class_count: int, e0_fraction=0.4, epsilon=None, alpha=0.1):
        if epsilon is None:
            epsilon = default_epsilon(class_count)
        return cls(e0=e0_fraction * math.log(class_count), epsilon=epsilon, alpha=alpha)


def default_epsilon(class_count: int) -> float:
    """Cosine threshold scaled with the class count: ``0.4 * sqrt(10 / C)``, capped below 1.

    A confident one-hot prediction has cosine ``1 / sqrt(C)`` against a balanced
    mean, so the threshold keeps the same ratio to that value as 0.4 does at
    ten classes. It gives about 0.04 at a thousand classes.
    """
    return min(0.4 * math.sqrt(10.0 / class_count), 0.95)


@dataclass
class EmaTracker:
    m: np.ndarray = None
    t: int = 0

    @property
    def empty(self) -> bool:
        return self.t == 0

    def copy(self) -> "EmaTracker":
        return EmaTracker(None if self.m is None else self.m.copy(), self.t)


@dataclass
class BatchSelection:
    entropy: np.ndarray
    s_ent: np.ndarray
    s_div: np.ndarray
    weight: np.ndarray
    active: np.ndarray = field(init=False)

    def __post_init__(self):
        self.active = self.weight > 0

    @property
    def n_active(self) -> int:
        return int(self.active.sum())


def ent_weight(e, e0):
    """``exp(e0 - e)`` where ``e < e0``, else 0. Works elementwise on arrays."""
    e = np.asarray(e, dtype=np.float64)
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise NumericDomainError("entropy must be finite and non-negative")
    out = np.where(e < e0, np.exp(e0 - np.minimum(e, e0)), 0.0)
    return float(out) if out.ndim == 0 else out


def ema_update(tracker: EmaTracker, ybar, alpha) -> EmaTracker:
    ybar = np.asarray(ybar, dtype=np.float64)
    if tracker.t == 0:
        return EmaTracker(ybar.copy(), 1)
    if ybar.shape != tracker.m.shape:
        raise ContractError(f"length mismatch: {ybar.shape} vs {tracker.m.shape}")
    return EmaTracker(alpha * ybar + (1.0 - alpha) * tracker.m, tracker.t + 1)


def div_weight(pred, tracker: EmaTracker, epsilon) -> int:
    if tracker.empty:
        if not np.any(np.asarray(pred)):
            cosine(pred, pred)  # raises DegenerateVectorError
        return 1
    return int(cosine(pred, tracker.m) < epsilon)


def select_batch(logits, config: SelectionConfig, tracker: EmaTracker):
    """Score a batch against ``m^{t-1}`` and return ``(selection, new_tracker)``."""
    logits = np.asarray(logits, dtype=np.float64)
    probs = softmax(logits)
    ent = entropy_from_logits(logits)
    s_ent = ent_weight(np.maximum(ent, 0.0), config.e0)
    s_ent = np.atleast_1d(s_ent)
    if tracker.empty:
        s_div = np.ones(len(probs))
    else:
        s_div = (cosine_rows(probs, tracker.m) < config.epsilon).astype(np.float64)
    sel = BatchSelection(entropy=ent, s_ent=s_ent, s_div=s_div, weight=s_ent * s_div)
    if sel.n_active:
        tracker = ema_update(tracker, exact_column_mean(probs[sel.active]), config.alpha)
    return sel, tracker
