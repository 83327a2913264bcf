"""Binary confusion metrics with alcohol as the positive class."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.n

    @property
    def tpr(self) -> float:
        """Sensitivity; NaN when there are no positives."""
        return self.tp / self.positives if self.positives else float("nan")

    @property
    def tnr(self) -> float:
        """Specificity; NaN when there are no negatives."""
        return self.tn / self.negatives if self.negatives else float("nan")

    def as_row(self) -> dict:
        return {
            "accuracy": pct(self.accuracy),
            "tnr": pct(self.tnr),
            "tpr": pct(self.tpr),
            "tp": self.tp,
            "tn": self.tn,
            "fp": self.fp,
            "fn": self.fn,
        }


def pct(x: float) -> str:
    """Fixed two-decimal percentage, e.g. ``0.92345 -> '92.35'``."""
    return "nan" if x != x else f"{100.0 * x:.2f}"


def confusion_metrics(predictions, truth) -> MetricsReport:
    """Counts for 0/1 predictions against 0/1 truth (1 = alcohol)."""
    p = np.asarray(predictions).astype(int).ravel()
    t = np.asarray(truth).astype(int).ravel()
    if p.shape != t.shape:
        raise ValueError(f"predictions ({p.size}) and truth ({t.size}) differ in length")
    if p.size == 0:
        raise ValueError("cannot compute metrics on empty input")
    if not (np.isin(p, (0, 1)).all() and np.isin(t, (0, 1)).all()):
        raise ValueError("predictions and truth must be 0/1 labels")
    return MetricsReport(
        tp=int(np.sum((p == 1) & (t == 1))),
        tn=int(np.sum((p == 0) & (t == 0))),
        fp=int(np.sum((p == 1) & (t == 0))),
        fn=int(np.sum((p == 0) & (t == 1))),
    )
