"""Confusion matrices and the two-proportion significance test."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float = 0.5

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v < 0:
                raise ConfigError(f"confusion count {name} must be a non-negative integer, got {v!r}")
            object.__setattr__(self, name, int(v))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def correct(self) -> int:
        return self.tp + self.tn

    @property
    def accuracy(self) -> float:
        # an empty matrix has no defined accuracy; report 0 rather than raising
        return self.correct / self.total if self.total else 0.0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def to_json(self) -> dict:
        d = asdict(self)
        d["accuracy"] = self.accuracy
        return d

    @classmethod
    def from_json(cls, d) -> "ConfusionMatrix":
        return cls(d["tp"], d["fp"], d["tn"], d["fn"], d.get("threshold", 0.5))


def confusion_from_predictions(p_success, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Tally with y_hat = 1 iff p_success >= threshold."""
    p = np.asarray(p_success, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.shape != y.shape:
        raise ConfigError(f"{p.size} probabilities for {y.size} labels")
    pred = p >= threshold
    pos = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
        threshold=threshold,
    )


def significance_test(a: ConfusionMatrix, b: ConfusionMatrix) -> float:
    """Two-sided two-proportion z-test on the accuracies of ``a`` and ``b``; returns the p-value.

    Uses the pooled proportion for the standard error. Both matrices must
    cover the same number of samples.
    """
    n_a, n_b = a.total, b.total
    if n_a == 0 or n_b == 0:
        raise ConfigError("significance test needs at least one sample per matrix")
    if n_a != n_b:
        raise ConfigError(f"matrices cover different sample counts ({n_a} vs {n_b})")
    p_a, p_b = a.correct / n_a, b.correct / n_b
    pooled = (a.correct + b.correct) / (n_a + n_b)
    se = math.sqrt(pooled * (1.0 - pooled) * (1.0 / n_a + 1.0 / n_b))
    if se == 0.0:
        return 1.0 if p_a == p_b else 0.0
    z = (p_a - p_b) / se
    return math.erfc(abs(z) / math.sqrt(2.0))
