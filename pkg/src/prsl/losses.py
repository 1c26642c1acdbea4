"""Cross-entropy and the partially recentralized softmax loss (PRSL).

PRSL adds ``b * d(w, mean(w))`` to cross-entropy, where ``w`` are the
softmax probabilities at descending ranks ``j..k`` and ``d`` is the
Euclidean distance.  The selected index set is held fixed when
differentiating; the dependence of the mean on the probabilities is not.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InvalidConfigError,
    InvalidLabelError,
    InvalidSequenceError,
    InvalidWindowError,
)
from .numerics import softmax, softmax_backward

__all__ = [
    "B_GRID",
    "DISTANCES",
    "LossBreakdown",
    "LossConfig",
    "RankWindow",
    "batch_loss",
    "cross_entropy",
    "prsl_grad",
    "prsl_loss",
    "recentralization_distance",
    "select_rank_window",
    "sequence_prsl",
    "sequence_prsl_grad",
]

# Decade grid for the penalty weight, 1e-1 down to 1e-10.
B_GRID = tuple(10.0 ** -e for e in range(1, 11))

# Below this squared distance the penalty gradient is defined as zero.
_ZERO_DISTANCE_SQ = 1e-24


@dataclass(frozen=True)
class RankWindow:
    """Descending-probability ranks ``j..k`` (1-indexed, inclusive)."""

    j: int
    k: int

    def __post_init__(self):
        if int(self.j) != self.j or int(self.k) != self.k:
            raise InvalidWindowError(f"window bounds must be integers, got ({self.j}, {self.k})")
        if not 1 <= self.j <= self.k:
            raise InvalidWindowError(f"need 1 <= j <= k, got ({self.j}, {self.k})")

    @property
    def size(self) -> int:
        return self.k - self.j + 1

    def check(self, num_classes: int) -> None:
        if self.k > num_classes:
            raise InvalidWindowError(
                f"window ({self.j}, {self.k}) exceeds class count {num_classes}"
            )

    @classmethod
    def parse(cls, text: str) -> "RankWindow":
        """Parse ``"j:k"``."""
        try:
            j, k = (int(part) for part in text.split(":"))
        except ValueError as exc:
            raise InvalidWindowError(f"cannot parse window {text!r}; expected j:k") from exc
        return cls(j, k)

    def __str__(self) -> str:
        return f"{self.j}:{self.k}"


def _euclidean(values: np.ndarray) -> np.ndarray:
    centered = values - values.mean(axis=-1, keepdims=True)
    d = np.sqrt((centered**2).sum(axis=-1))
    # a constant window is exactly at its mean, whatever the rounding of the mean
    return np.where(values.max(axis=-1) == values.min(axis=-1), 0.0, d)


def _euclidean_grad(values: np.ndarray) -> np.ndarray:
    centered = values - values.mean(axis=-1, keepdims=True)
    sq = (centered**2).sum(axis=-1, keepdims=True)
    safe = np.where(sq < _ZERO_DISTANCE_SQ, 1.0, np.sqrt(sq))
    # centered sums to zero, so the mean's own derivative cancels out here
    return np.where(sq < _ZERO_DISTANCE_SQ, 0.0, centered / safe)


# name -> (distance over the last axis, gradient with respect to the values)
DISTANCES = {"euclidean": (_euclidean, _euclidean_grad)}


@dataclass(frozen=True)
class LossConfig:
    b: float = 0.0
    window: RankWindow = field(default_factory=lambda: RankWindow(2, 6))
    distance: str = "euclidean"
    sequence_reduction: str = "mean"

    def __post_init__(self):
        if not (np.isfinite(self.b) and self.b >= 0):
            raise InvalidConfigError(f"penalty weight b must be finite and >= 0, got {self.b}")
        if self.distance not in DISTANCES:
            raise InvalidConfigError(f"unknown distance {self.distance!r}")
        if self.sequence_reduction not in ("mean", "sum"):
            raise InvalidConfigError(
                f"sequence_reduction must be 'mean' or 'sum', got {self.sequence_reduction!r}"
            )

    def to_dict(self) -> dict:
        return {
            "b": self.b,
            "window": [self.window.j, self.window.k],
            "distance": self.distance,
            "sequence_reduction": self.sequence_reduction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        window = d.get("window", [2, 6])
        if isinstance(window, str):
            window = RankWindow.parse(window)
        elif not isinstance(window, RankWindow):
            window = RankWindow(*window)
        return cls(
            b=float(d.get("b", 0.0)),
            window=window,
            distance=d.get("distance", "euclidean"),
            sequence_reduction=d.get("sequence_reduction", "mean"),
        )


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    ce: float
    penalty: float
    selected_indices: tuple


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu":
        if not np.all(np.mod(labels, 1) == 0):
            raise InvalidLabelError(f"labels must be integers, got {labels}")
        labels = labels.astype(np.int64)
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise InvalidLabelError(f"label out of range [0, {num_classes})")
    return labels.astype(np.int64)


def _ranked_window(probs: np.ndarray, window: RankWindow) -> np.ndarray:
    """Class indices at ranks j..k for each row; ties go to the lower index."""
    window.check(probs.shape[-1])
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., window.j - 1 : window.k]


def batch_loss(logits, labels, config: LossConfig | None = None, need_grad: bool = True):
    """Row-wise CE, penalty and ``d total / d logits`` for a batch of logits.

    Returns ``(ce, penalty, grad, selected)`` with shapes ``(N,)``,
    ``(N,)``, ``(N, C)`` and ``(N, k - j + 1)``.  With ``config=None`` or
    ``b == 0`` the penalty never touches the gradient, so the result is
    bitwise identical to plain cross-entropy.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise InvalidSequenceError(f"expected (N, C) logits, got shape {z.shape}")
    n, c = z.shape
    labels = _check_labels(labels, c)
    if labels.shape != (n,):
        raise InvalidSequenceError(f"{labels.shape[0] if labels.ndim else 1} labels for {n} rows")

    p = softmax(z)
    shifted = z - z.max(axis=-1, keepdims=True)
    rows = np.arange(n)
    # log-sum-exp minus the label logit; never yields -0.0
    ce = np.log(np.exp(shifted).sum(axis=-1)) - shifted[rows, labels]
    grad = None
    if need_grad:
        grad = p.copy()
        grad[rows, labels] -= 1.0

    if config is None:
        return ce, np.zeros(n), grad, np.zeros((n, 0), dtype=np.int64)

    dist, dist_grad = DISTANCES[config.distance]
    selected = _ranked_window(p, config.window)
    values = np.take_along_axis(p, selected, axis=-1)
    penalty = dist(values)
    if need_grad and config.b != 0.0:
        g_probs = np.zeros_like(p)
        np.put_along_axis(g_probs, selected, dist_grad(values), axis=-1)
        grad = grad + config.b * softmax_backward(g_probs, p)
    return ce, penalty, grad, selected


def cross_entropy(logits, label) -> float:
    """``-log_softmax(logits)[label]``."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise InvalidSequenceError(f"expected a logits vector, got shape {z.shape}")
    ce, _, _, _ = batch_loss(z[None, :], [label], None, need_grad=False)
    return float(ce[0])


def select_rank_window(probs, window: RankWindow) -> list[tuple[int, float]]:
    """(class index, probability) pairs at descending ranks ``j..k``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise InvalidSequenceError(f"expected a probability vector, got shape {p.shape}")
    idx = _ranked_window(p, window)
    return [(int(i), float(p[i])) for i in idx]


def recentralization_distance(values, distance: str = "euclidean") -> float:
    """Distance between ``values`` and the constant vector of their mean."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise InvalidWindowError("recentralization needs a non-empty vector of values")
    if np.any(v < 0) or np.any(v > 1):
        raise InvalidWindowError("windowed values must be probabilities in [0, 1]")
    return float(DISTANCES[distance][0](v))


def prsl_loss(logits, label, config: LossConfig) -> LossBreakdown:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise InvalidSequenceError(f"expected a logits vector, got shape {z.shape}")
    ce, pen, _, sel = batch_loss(z[None, :], [label], config, need_grad=False)
    ce, pen = float(ce[0]), float(pen[0])
    return LossBreakdown(ce + config.b * pen, ce, pen, tuple(int(i) for i in sel[0]))


def prsl_grad(logits, label, config: LossConfig) -> np.ndarray:
    """Gradient of ``prsl_loss(...).total`` with respect to the logits."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise InvalidSequenceError(f"expected a logits vector, got shape {z.shape}")
    return batch_loss(z[None, :], [label], config)[2][0]


def _sequence(logit_rows, token_labels):
    rows = np.asarray(logit_rows, dtype=np.float64)
    labels = np.asarray(token_labels)
    if rows.ndim != 2 or labels.ndim != 1 or rows.shape[0] != labels.shape[0]:
        raise InvalidSequenceError(
            f"{rows.shape[0] if rows.ndim else 0} logit rows vs {labels.size} labels"
        )
    if rows.shape[0] == 0:
        raise InvalidSequenceError("sequence must have at least one position")
    return rows, labels


def sequence_prsl(logit_rows: Sequence, token_labels: Sequence, config: LossConfig) -> LossBreakdown:
    """Per-position PRSL reduced (mean or sum) separately over ce and penalty."""
    rows, labels = _sequence(logit_rows, token_labels)
    ce, pen, _, sel = batch_loss(rows, labels, config, need_grad=False)
    reduce = np.mean if config.sequence_reduction == "mean" else np.sum
    ce_r, pen_r = float(reduce(ce)), float(reduce(pen))
    selected = tuple(tuple(int(i) for i in s) for s in sel)
    return LossBreakdown(ce_r + config.b * pen_r, ce_r, pen_r, selected)


def sequence_prsl_grad(logit_rows, token_labels, config: LossConfig) -> np.ndarray:
    rows, labels = _sequence(logit_rows, token_labels)
    grad = batch_loss(rows, labels, config)[2]
    if config.sequence_reduction == "mean":
        grad = grad / rows.shape[0]
    return grad
