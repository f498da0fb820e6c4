"""Balanced accuracy, sensitivity, specificity and ROC AUC (positive class = atypical)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError

TABLE_COLUMNS = ("Balanced Acc.", "Sensitivity", "Specificity", "ROC AUC")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fn: int
    tn: int
    fp: int

    @property
    def n(self) -> int:
        return self.tp + self.fn + self.tn + self.fp


def confusion(labels, preds) -> ConfusionCounts:
    y = np.asarray(labels).astype(int).ravel()
    p = np.asarray(preds).astype(int).ravel()
    if y.shape != p.shape:
        raise ValueError(f"confusion: {y.size} labels vs {p.size} predictions")
    if y.size == 0:
        raise ValueError("confusion: empty input")
    if not (np.isin(y, (0, 1)).all() and np.isin(p, (0, 1)).all()):
        raise ValueError("confusion: labels and predictions must be binary")
    return ConfusionCounts(
        tp=int(np.sum((y == 1) & (p == 1))),
        fn=int(np.sum((y == 1) & (p == 0))),
        tn=int(np.sum((y == 0) & (p == 0))),
        fp=int(np.sum((y == 0) & (p == 1))),
    )


def sensitivity(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        raise UndefinedMetricError("undefined metric: sensitivity needs at least one positive")
    return c.tp / (c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    if c.tn + c.fp == 0:
        raise UndefinedMetricError("undefined metric: specificity needs at least one negative")
    return c.tn / (c.tn + c.fp)


def balanced_accuracy(c: ConfusionCounts) -> float:
    return (sensitivity(c) + specificity(c)) / 2.0


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(s+ > s-) + 0.5 P(s+ == s-), via mid-ranks."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(int).ravel()
    if s.shape != y.shape:
        raise ValueError(f"roc_auc: {s.size} scores vs {y.size} labels")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("undefined metric: ROC AUC needs both classes")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluate(probs, labels, threshold: float = 0.5) -> dict:
    probs = np.asarray(probs, dtype=np.float64)
    c = confusion(labels, probs >= threshold)
    return {
        "Balanced Acc.": balanced_accuracy(c),
        "Sensitivity": sensitivity(c),
        "Specificity": specificity(c),
        "ROC AUC": roc_auc(probs, labels),
    }


def format_report(rows: dict) -> str:
    """Text table, one row per method, one column per metric."""
    name_w = max([len("Method")] + [len(k) for k in rows])
    head = "Method".ljust(name_w) + " | " + " | ".join(TABLE_COLUMNS)
    lines = [head, "-" * len(head)]
    for name, vals in rows.items():
        cells = [f"{vals[c]:.4f}".rjust(len(c)) for c in TABLE_COLUMNS]
        lines.append(name.ljust(name_w) + " | " + " | ".join(cells))
    return "\n".join(lines) + "\n"
