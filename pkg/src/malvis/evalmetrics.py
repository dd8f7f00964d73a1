"""Confusion matrices and accuracy / precision / recall with micro and macro averaging.

All metrics are computed as exact fractions; convert with ``float()`` for display.
Rows of the confusion matrix are true classes, columns are predicted classes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {c.shape}")
        if c.size and c.min() < 0:
            raise ValueError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other):
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return np.array_equal(self.counts, other.counts)


@dataclass(frozen=True)
class ClassMetrics:
    label: str
    precision: Fraction
    recall: Fraction
    support: int
    precision_undefined: bool = False
    recall_undefined: bool = False


@dataclass(frozen=True)
class EvalReport:
    accuracy: Fraction
    precision_micro: Fraction
    precision_macro: Fraction
    recall_micro: Fraction
    recall_macro: Fraction
    per_class: tuple
    matrix: ConfusionMatrix
    scope: str = ""

    def summary(self) -> List[Fraction]:
        """The five headline metrics in table order."""
        return [self.accuracy, self.precision_micro, self.precision_macro,
                self.recall_micro, self.recall_macro]


SUMMARY_COLUMNS = ("Accuracy", "Precision(micro)", "Precision(macro)", "Recall(micro)", "Recall(macro)")


def confusion(true_labels: Sequence[int], predicted_labels: Sequence[int], k: int) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    p = np.asarray(predicted_labels, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise ValueError(f"label sequences differ in length: {t.size} vs {p.size}")
    for name, arr in (("true", t), ("predicted", p)):
        bad = np.flatnonzero((arr < 0) | (arr >= k))
        if bad.size:
            i = int(bad[0])
            raise ValueError(f"{name} label {int(arr[i])} at sample {i} outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def _ratio(num: int, den: int):
    if den == 0:
        return Fraction(0), True
    return Fraction(num, den), False


def metrics(matrix: ConfusionMatrix, labels: Optional[Sequence[str]] = None, scope: str = "") -> EvalReport:
    """One-vs-rest TP/FP/FN per class, macro = plain mean, micro = pooled counts.

    A class whose precision (or recall) denominator is zero gets 0 and is flagged.
    """
    c = matrix.counts
    total = matrix.total
    if matrix.k == 0 or total == 0:
        raise ValueError("empty confusion matrix")
    labels = list(labels) if labels is not None else [str(i) for i in range(matrix.k)]
    if len(labels) != matrix.k:
        raise ValueError(f"{len(labels)} labels for {matrix.k} classes")
    tp = [int(c[i, i]) for i in range(matrix.k)]
    col = [int(v) for v in c.sum(axis=0)]
    row = [int(v) for v in c.sum(axis=1)]
    per_class = []
    for i in range(matrix.k):
        prec, p_undef = _ratio(tp[i], col[i])
        rec, r_undef = _ratio(tp[i], row[i])
        per_class.append(ClassMetrics(labels[i], prec, rec, row[i], p_undef, r_undef))
    k = matrix.k
    sum_tp = sum(tp)
    sum_fp = sum(col[i] - tp[i] for i in range(k))
    sum_fn = sum(row[i] - tp[i] for i in range(k))
    return EvalReport(
        accuracy=Fraction(sum_tp, total),
        precision_micro=Fraction(sum_tp, sum_tp + sum_fp),
        precision_macro=sum((m.precision for m in per_class), Fraction(0)) / k,
        recall_micro=Fraction(sum_tp, sum_tp + sum_fn),
        recall_macro=sum((m.recall for m in per_class), Fraction(0)) / k,
        per_class=tuple(per_class),
        matrix=matrix,
        scope=scope,
    )


def pct(value) -> str:
    """Percentage with two decimals, rounded half-up on the exact value."""
    scaled = Fraction(value) * 10000
    hundredths = (scaled.numerator * 2 + scaled.denominator) // (2 * scaled.denominator)
    return f"{hundredths // 100}.{hundredths % 100:02d}"


def render_text(report: EvalReport, title: str = "") -> str:
    lines = []
    if title:
        lines.append(title)
    if report.scope:
        lines.append(f"scope: {report.scope} ({report.matrix.total} samples)")
    for col, val in zip(SUMMARY_COLUMNS, report.summary()):
        lines.append(f"{col:<18} {pct(val):>6}")
    lines.append("")
    width = max([5] + [len(m.label) for m in report.per_class])
    lines.append(f"{'class':<{width}}  precision  recall  support")
    for m in report.per_class:
        flag = " *" if (m.precision_undefined or m.recall_undefined) else ""
        lines.append(f"{m.label:<{width}}  {pct(m.precision):>9}  {pct(m.recall):>6}  {m.support:>7}{flag}")
    if any(m.precision_undefined or m.recall_undefined for m in report.per_class):
        lines.append("* zero denominator; value reported as 0")
    return "\n".join(lines) + "\n"


def metrics_csv(report: EvalReport) -> str:
    lines = ["class,precision,recall,support"]
    for m in report.per_class:
        lines.append(f"{m.label},{float(m.precision)!r},{float(m.recall)!r},{m.support}")
    lines.append("")
    lines.append("metric,value")
    keys = ("accuracy", "precision_micro", "precision_macro", "recall_micro", "recall_macro")
    for key, val in zip(keys, report.summary()):
        lines.append(f"{key},{float(val)!r}")
    lines.append(f"samples,{report.matrix.total}")
    if report.scope:
        lines.append(f"scope,{report.scope}")
    return "\n".join(lines) + "\n"


def confusion_csv(matrix: ConfusionMatrix, labels: Optional[Sequence[str]] = None) -> str:
    labels = list(labels) if labels is not None else [str(i) for i in range(matrix.k)]
    lines = ["true\\pred," + ",".join(labels)]
    for label, row in zip(labels, matrix.counts):
        lines.append(label + "," + ",".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, directory: Union[str, os.PathLike], title: str = "") -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    labels = [m.label for m in report.per_class]
    (d / "metrics.csv").write_text(metrics_csv(report), encoding="utf-8")
    (d / "confusion.csv").write_text(confusion_csv(report.matrix, labels), encoding="utf-8")
    (d / "report.txt").write_text(render_text(report, title), encoding="utf-8")


SCOPES = ("test_split", "all")


def evaluate(model, corpus, scope: str = "test_split", cache=None, batch_size: int = 64) -> EvalReport:
    """Run inference over the chosen records and score it.

    ``scope="all"`` covers every record regardless of split; ``"test_split"``
    only the held-out records.
    """
    from .corpus import TEST
    from .train import load_split, predict_logits

    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    k = len(corpus.family_table)
    if model.class_count != k:
        raise ValueError(f"model has {model.class_count} classes, corpus has {k} families")
    x, y = load_split(corpus, TEST if scope == "test_split" else None,
                      model.input_side, model.input_channels, cache)
    pred = predict_logits(model, x, batch_size).argmax(axis=1) if len(y) else np.zeros(0, np.int64)
    return metrics(confusion(y, pred, k), [f.name for f in corpus.family_table], scope)
