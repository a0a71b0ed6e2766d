"""Regression and binary-classification metrics.

Conventions: precision, recall and F1 are 0 when their denominator is 0;
predicted class ties go to the lower index; ROC scores are the
probability of class 1 (female).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError

CLASSES = (0, 1)


def _paired(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.size != y_hat.size:
        raise DomainError(f"length mismatch: {y.size} labels vs {y_hat.size} predictions")
    if y.size == 0:
        raise DomainError("metrics need at least one sample")
    return y, y_hat


def mse(y, y_hat) -> float:
    y, y_hat = _paired(y, y_hat)
    d = y - y_hat
    return math.fsum(d * d) / d.size


def rmse(y, y_hat) -> float:
    return math.sqrt(mse(y, y_hat))


def rmse_from_mse(value: float) -> float:
    if value < 0:
        raise DomainError(f"mse must be non-negative, got {value}")
    return math.sqrt(value)


def mae(y, y_hat) -> float:
    y, y_hat = _paired(y, y_hat)
    return math.fsum(np.abs(y - y_hat)) / y.size


def mae_by_decade(y, y_hat, width: int = 10) -> dict[str, float]:
    """MAE restricted to each ``width``-year age bin that has samples."""
    y, y_hat = _paired(y, y_hat)
    bins = (y // width).astype(int)
    out = {}
    for b in sorted(set(bins.tolist())):
        sel = bins == b
        out[f"{b * width}-{b * width + width - 1}"] = math.fsum(np.abs(y[sel] - y_hat[sel])) / int(sel.sum())
    return out


@dataclass(frozen=True)
class RegressionReport:
    mse: float
    rmse: float
    mae: float
    n: int
    mae_by_decade: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, y, y_hat) -> "RegressionReport":
        m = mse(y, y_hat)
        return cls(mse=m, rmse=math.sqrt(m), mae=mae(y, y_hat), n=len(_paired(y, y_hat)[0]), mae_by_decade=mae_by_decade(y, y_hat))

    def to_dict(self) -> dict:
        return {"mse": self.mse, "rmse": self.rmse, "mae": self.mae, "n": self.n, "mae_by_decade": dict(self.mae_by_decade)}

    def render(self) -> str:
        lines = [f"{'Metric':<8}{'Score':>10}"]
        for name in ("mse", "rmse", "mae"):
            lines.append(f"{name.upper():<8}{getattr(self, name):>10.4f}")
        if self.mae_by_decade:
            lines.append("")
            lines.append(f"{'Age bin':<10}{'MAE':>10}")
            for k, v in self.mae_by_decade.items():
                lines.append(f"{k:<10}{v:>10.4f}")
        return "\n".join(lines) + "\n"


# -- classification ------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[true][pred]`` for the two gender classes."""

    counts: tuple[tuple[int, int], tuple[int, int]]

    @classmethod
    def from_array(cls, arr) -> "ConfusionMatrix":
        a = np.asarray(arr)
        if a.shape != (2, 2) or np.any(a < 0):
            raise DomainError(f"confusion matrix must be 2×2 non-negative, got {a.tolist()}")
        return cls(tuple(tuple(int(v) for v in row) for row in a))

    def array(self) -> np.ndarray:
        return np.array(self.counts, dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.array().sum())

    def normalized(self) -> np.ndarray:
        """Rows divided by their support; empty rows stay zero."""
        a = self.array().astype(np.float64)
        sums = a.sum(axis=1, keepdims=True)
        return np.divide(a, sums, out=np.zeros_like(a), where=sums > 0)

    def to_dict(self) -> dict:
        return {"counts": [list(r) for r in self.counts], "normalized": self.normalized().tolist()}


def confusion_matrix(labels: Sequence[int], preds: Sequence[int]) -> ConfusionMatrix:
    labels = list(labels)
    preds = list(preds)
    if len(labels) != len(preds):
        raise DomainError(f"length mismatch: {len(labels)} labels vs {len(preds)} predictions")
    counts = [[0, 0], [0, 0]]
    for t, p in zip(labels, preds):
        if t not in CLASSES or p not in CLASSES:
            raise DomainError(f"unknown class value in pair ({t}, {p}); classes are {CLASSES}")
        counts[int(t)][int(p)] += 1
    return ConfusionMatrix.from_array(counts)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class ClassificationReport:
    per_class: tuple[ClassMetrics, ...]
    accuracy: float
    macro: ClassMetrics
    weighted: ClassMetrics
    total: int
    confusion: ConfusionMatrix

    def to_dict(self) -> dict:
        def row(m: ClassMetrics) -> dict:
            return {"precision": m.precision, "recall": m.recall, "f1": m.f1, "support": m.support}

        return {
            "confusion_matrix": self.confusion.to_dict(),
            "per_class": {str(c): row(m) for c, m in zip(CLASSES, self.per_class)},
            "accuracy": self.accuracy,
            "macro_avg": row(self.macro),
            "weighted_avg": row(self.weighted),
            "total": self.total,
        }

    def render(self) -> str:
        head = f"{'Class':<18}{'Precision':>10}{'Recall':>10}{'F1-Score':>10}{'Support':>10}"
        lines = [head]
        for c, m in zip(CLASSES, self.per_class):
            lines.append(f"{c:<18}{m.precision:>10.2f}{m.recall:>10.2f}{m.f1:>10.2f}{m.support:>10d}")
        lines.append(f"{'Accuracy':<18}{'-':>10}{'-':>10}{self.accuracy:>10.2f}{self.total:>10d}")
        for name, m in (("Macro-Average", self.macro), ("Weighted-Average", self.weighted)):
            lines.append(f"{name:<18}{m.precision:>10.2f}{m.recall:>10.2f}{m.f1:>10.2f}{m.support:>10d}")
        return "\n".join(lines) + "\n"


def classification_report(cm: ConfusionMatrix) -> ClassificationReport:
    a = cm.array()
    total = int(a.sum())
    if total < 1:
        raise DomainError("classification report needs at least one sample")
    per_class = []
    for c in CLASSES:
        tp = a[c, c]
        fp = a[:, c].sum() - tp
        fn = a[c, :].sum() - tp
        p = _ratio(tp, tp + fp)
        r = _ratio(tp, tp + fn)
        per_class.append(ClassMetrics(p, r, _ratio(2 * p * r, p + r), int(a[c, :].sum())))
    k = len(per_class)
    macro = ClassMetrics(
        sum(m.precision for m in per_class) / k,
        sum(m.recall for m in per_class) / k,
        sum(m.f1 for m in per_class) / k,
        total,
    )
    weighted = ClassMetrics(
        sum(m.precision * m.support for m in per_class) / total,
        sum(m.recall * m.support for m in per_class) / total,
        sum(m.f1 * m.support for m in per_class) / total,
        total,
    )
    return ClassificationReport(tuple(per_class), float(np.trace(a)) / total, macro, weighted, total, cm)


def predicted_classes(probs: np.ndarray) -> np.ndarray:
    """Row-wise argmax; the lower class wins ties."""
    return np.asarray(probs).argmax(axis=1)


# -- ROC -----------------------------------------------------------------------


@dataclass(frozen=True)
class RocCurve:
    thresholds: tuple[float, ...]
    fpr: tuple[float, ...]
    tpr: tuple[float, ...]
    auc: float

    def to_dict(self) -> dict:
        return {"auc": self.auc, "points": [[f, t] for f, t in zip(self.fpr, self.tpr)]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for th, f, t in zip(self.thresholds, self.fpr, self.tpr):
            w.writerow([repr(th), repr(f), repr(t)])
        return buf.getvalue()


def _binary(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels).reshape(-1)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if labels.size != scores.size:
        raise DomainError(f"length mismatch: {labels.size} labels vs {scores.size} scores")
    if not np.all(np.isin(labels, CLASSES)):
        raise DomainError("ROC labels must be 0 or 1")
    if labels.sum() == 0 or labels.sum() == labels.size:
        raise DomainError("ROC needs at least one positive and one negative label")
    return labels.astype(np.int64), scores


def auc_mann_whitney(labels, scores) -> float:
    """P(score of a positive > score of a negative) + half the tie probability, via mid-ranks."""
    labels, scores = _binary(labels, scores)
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        ranks[i : j + 1] = (i + j) / 2.0 + 1.0
        i = j + 1
    rank_of = np.empty_like(ranks)
    rank_of[order] = ranks
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    u = math.fsum(rank_of[labels == 1]) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def roc_auc(labels, scores) -> RocCurve:
    """Threshold sweep over the distinct scores, highest first; trapezoidal area."""
    labels, scores = _binary(labels, scores)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    thresholds, tps, fps = [math.inf], [0], [0]
    tp = fp = 0
    for i in range(s.size):
        tp += int(y[i])
        fp += 1 - int(y[i])
        if i + 1 == s.size or s[i + 1] != s[i]:
            thresholds.append(float(s[i]))
            tps.append(tp)
            fps.append(fp)
    # exact integer trapezoid area, scaled once
    twice_area = sum((fps[i] - fps[i - 1]) * (tps[i] + tps[i - 1]) for i in range(1, len(tps)))
    auc = twice_area / (2.0 * n_pos * n_neg)
    return RocCurve(
        tuple(thresholds),
        tuple(f / n_neg for f in fps),
        tuple(t / n_pos for t in tps),
        auc,
    )
