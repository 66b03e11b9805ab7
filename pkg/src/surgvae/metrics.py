"""Ranking metrics for binary outcomes.

Undefined metrics (for example AUROC with a single class present) are
returned as ``None`` rather than raising, so per-outcome tables can carry
gaps.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    sensitivity: float
    specificity: float | None
    precision: float
    accuracy: float

    def to_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True)
class MacroResult:
    value: float | None
    n_used: int
    n_excluded: int


def _prep(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    return s, y.astype(bool)


def _average_ranks(s):
    _, inv, counts = np.unique(s, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts).astype(np.float64)
    return (upper - (counts - 1) / 2.0)[inv]


def auroc(scores, labels) -> float | None:
    """Mann-Whitney statistic with ties counted as one half."""
    s, y = _prep(scores, labels)
    P = int(y.sum())
    N = y.size - P
    if P == 0 or N == 0:
        return None
    ranks = _average_ranks(s)
    u = ranks[y].sum() - P * (P + 1) / 2.0
    return float(u / (P * N))


def _blocks(s, y):
    """Distinct thresholds in descending order with cumulative tp/fp."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return s[last], tp.astype(np.float64), fp.astype(np.float64)


def auprc(scores, labels) -> float | None:
    """Average precision; tied scores form one block sharing its precision."""
    s, y = _prep(scores, labels)
    P = int(y.sum())
    if P == 0:
        return None
    _, tp, fp = _blocks(s, y)
    new_pos = np.diff(np.r_[0.0, tp])
    precision = tp / (tp + fp)
    return float((new_pos * precision).sum() / P)


def macro_average(values: Iterable[float | None]) -> MacroResult:
    vals = list(values)
    used = [v for v in vals if v is not None]
    if not used:
        return MacroResult(None, 0, len(vals))
    return MacroResult(float(np.mean(used)), len(used), len(vals) - len(used))


def metrics_at_sensitivity(scores, labels, target: float = 0.85) -> OperatingPoint | None:
    """Largest threshold (predict positive when score >= t) reaching ``target`` sensitivity."""
    s, y = _prep(scores, labels)
    P = int(y.sum())
    N = y.size - P
    if P == 0:
        return None
    thr, tp, fp = _blocks(s, y)
    ok = (tp / P >= target) & (tp > 0)
    i = int(np.flatnonzero(ok)[0])
    t, tpi, fpi = float(thr[i]), tp[i], fp[i]
    tn = N - fpi
    return OperatingPoint(
        threshold=t,
        sensitivity=float(tpi / P),
        specificity=float(tn / N) if N else None,
        precision=float(tpi / (tpi + fpi)),
        accuracy=float((tpi + tn) / y.size),
    )


@dataclass(frozen=True)
class Curves:
    roc_thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    pr_thresholds: np.ndarray
    recall: np.ndarray
    precision: np.ndarray


def curve_points(scores, labels) -> Curves | None:
    """ROC and PR points, one per distinct threshold plus the (0, 0) / recall-0 start."""
    s, y = _prep(scores, labels)
    P = int(y.sum())
    N = y.size - P
    if P == 0 or N == 0:
        return None
    thr, tp, fp = _blocks(s, y)
    thresholds = np.r_[np.inf, thr]
    tpr = np.r_[0.0, tp / P]
    fpr = np.r_[0.0, fp / N]
    precision = np.r_[1.0, tp / (tp + fp)]
    return Curves(thresholds, fpr, tpr, thresholds.copy(), tpr.copy(), precision)


def trapezoid_area(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))
