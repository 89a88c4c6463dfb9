"""Confusion-count bookkeeping and the evaluation metric suite.

Works for per-pixel segmentation and per-sample classification alike: tally
binary predictions against truth, then derive accuracy, precision, recall,
F1, Matthews correlation, and Dice overlap. Degenerate denominators report
0.0 and are flagged rather than returning NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "mcc", "dice")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn
        )


@dataclass(frozen=True)
class MetricSuite:
    accuracy: float
    precision: float
    recall: float
    f1: float
    mcc: float
    dice: float
    degenerate: frozenset[str] = frozenset()

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def lines(self, prefix: str = "") -> list[str]:
        """key=value block, one metric per line, stable order."""
        out = [f"{prefix}{name} = {getattr(self, name):.6f}" for name in METRIC_NAMES]
        if self.degenerate:
            out.append(f"{prefix}degenerate = {','.join(sorted(self.degenerate))}")
        return out


def tally(pred, truth) -> ConfusionCounts:
    """Exact TP/TN/FP/FN counts; positive class is 1."""
    p = np.asarray(pred).reshape(-1)
    t = np.asarray(truth).reshape(-1)
    if p.size != t.size:
        raise ValueError(f"tally: length mismatch {p.size} vs {t.size}")
    if p.size == 0:
        raise ValueError("tally: empty sequences")
    for name, arr in (("pred", p), ("truth", t)):
        bad = (arr != 0) & (arr != 1)
        if bad.any():
            raise ValueError(f"tally: non-binary value {arr[bad][0]!r} in {name}")
    p = p.astype(bool)
    t = t.astype(bool)
    tp = int(np.count_nonzero(p & t))
    tn = int(np.count_nonzero(~p & ~t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, tn, fp, fn)


def _ratio(num: int, den: int, name: str, degenerate: set[str]) -> float:
    if den == 0:
        degenerate.add(name)
        return 0.0
    return num / den


def metric_suite(c: ConfusionCounts) -> MetricSuite:
    if c.total < 1:
        raise ValueError("metric_suite: at least one counted instance required")
    degenerate: set[str] = set()
    accuracy = (c.tp + c.tn) / c.total
    precision = _ratio(c.tp, c.tp + c.fp, "precision", degenerate)
    recall = _ratio(c.tp, c.tp + c.fn, "recall", degenerate)
    if precision + recall == 0.0:
        if "precision" not in degenerate and "recall" not in degenerate:
            degenerate.add("f1")
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    mcc_den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if mcc_den == 0:
        degenerate.add("mcc")
        mcc = 0.0
    else:
        mcc = (c.tp * c.tn - c.fp * c.fn) / math.sqrt(mcc_den)
    dice = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "dice", degenerate)
    return MetricSuite(accuracy, precision, recall, f1, mcc, dice, frozenset(degenerate))


@dataclass(frozen=True)
class MulticlassReport:
    matrix: tuple[tuple[int, ...], ...]  # matrix[truth][pred]
    per_class: tuple[MetricSuite, ...]
    macro: dict[str, float]


def multiclass_report(pred, truth, k: int) -> MulticlassReport:
    """k-class confusion matrix plus one-vs-rest suites and macro averages."""
    p = np.asarray(pred).reshape(-1).astype(int)
    t = np.asarray(truth).reshape(-1).astype(int)
    if p.size != t.size:
        raise ValueError(f"multiclass_report: length mismatch {p.size} vs {t.size}")
    if p.size == 0:
        raise ValueError("multiclass_report: empty sequences")
    for name, arr in (("pred", p), ("truth", t)):
        if ((arr < 0) | (arr >= k)).any():
            bad = arr[(arr < 0) | (arr >= k)][0]
            raise ValueError(f"multiclass_report: label {bad} in {name} out of range [0,{k})")
    matrix = np.zeros((k, k), dtype=int)
    np.add.at(matrix, (t, p), 1)
    suites = []
    for c in range(k):
        suites.append(metric_suite(tally((p == c).astype(int), (t == c).astype(int))))
    macro = {
        name: float(np.mean([getattr(s, name) for s in suites])) for name in METRIC_NAMES
    }
    return MulticlassReport(
        matrix=tuple(tuple(int(v) for v in row) for row in matrix),
        per_class=tuple(suites),
        macro=macro,
    )
