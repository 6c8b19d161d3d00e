"""Confusion matrices, accuracy, binary ROC/AUC projections and the report.

Class order throughout is normal=0, TB=1, cancer=2.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, EvaluationError

DEFAULT_CLASS_NAMES = ("normal", "TB", "cancer")
NORMAL, TB, CANCER = 0, 1, 2


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    class_names: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(true_labels, predicted_labels, k: int, class_names: Sequence[str] | None = None) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=int)
    p = np.asarray(predicted_labels, dtype=int)
    if t.shape != p.shape:
        raise ContractError(f"label lists differ in length: {t.size} true vs {p.size} predicted")
    if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    return ConfusionMatrix(counts, names)


def normalize_confusion(cm: ConfusionMatrix) -> tuple[np.ndarray, list[int]]:
    """Row-normalized fractions plus the indices of all-zero rows (left at zero)."""
    counts = cm.counts.astype(np.float64)
    sums = counts.sum(axis=1, keepdims=True)
    empty = [int(i) for i in np.flatnonzero(sums[:, 0] == 0)]
    with np.errstate(invalid="ignore", divide="ignore"):
        fractions = np.where(sums > 0, counts / np.where(sums > 0, sums, 1.0), 0.0)
    return fractions, empty


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ContractError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm.counts) / cm.total)


# ------------------------------------------------------------------ binary


class BinaryProjection(str, enum.Enum):
    ABNORMAL_VS_NORMAL = "ABNORMAL_VS_NORMAL"
    TB_VS_CANCER = "TB_VS_CANCER"
    CANCER_VS_REST = "CANCER_VS_REST"


PROJECTION_ORDER = (
    BinaryProjection.ABNORMAL_VS_NORMAL,
    BinaryProjection.TB_VS_CANCER,
    BinaryProjection.CANCER_VS_REST,
)

PROJECTION_SCORES = {
    BinaryProjection.ABNORMAL_VS_NORMAL: "all samples; positive=TB or cancer; score=p(TB)+p(cancer)",
    BinaryProjection.TB_VS_CANCER: "TB and cancer samples; positive=cancer; score=p(cancer)/(p(TB)+p(cancer)), 0.5 if undefined",
    BinaryProjection.CANCER_VS_REST: "all samples; positive=cancer; score=p(cancer)",
}


def binary_scores(probabilities, true_labels, projection: BinaryProjection) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(true_labels, dtype=int)
    if probs.ndim != 2 or probs.shape[1] != 3:
        raise ContractError(f"binary projections need 3-class probabilities, got shape {probs.shape}")
    projection = BinaryProjection(projection)
    if projection is BinaryProjection.ABNORMAL_VS_NORMAL:
        scores = probs[:, TB] + probs[:, CANCER]
        binary = (labels != NORMAL).astype(int)
    elif projection is BinaryProjection.TB_VS_CANCER:
        keep = (labels == TB) | (labels == CANCER)
        p_tb, p_ca = probs[keep, TB], probs[keep, CANCER]
        denom = p_tb + p_ca
        safe = denom >= 1e-12
        scores = np.where(safe, p_ca / np.where(safe, denom, 1.0), 0.5)
        binary = (labels[keep] == CANCER).astype(int)
    else:
        scores = probs[:, CANCER].copy()
        binary = (labels == CANCER).astype(int)
    if binary.size == 0 or binary.all() or not binary.any():
        raise EvaluationError(
            f"{projection.value}: {int(binary.sum())} positives and {int((binary == 0).sum())} negatives; AUC undefined"
        )
    return scores, binary


@dataclass
class RocCurve:
    thresholds: np.ndarray  # +inf, distinct scores descending, -inf
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_and_auc(scores, binary_labels) -> RocCurve:
    """ROC over every distinct score threshold; ``score >= t`` predicts positive.

    The area is integrated with the trapezoid rule, which gives tied
    positive/negative pairs half credit.
    """
    values = np.asarray(scores, dtype=np.float64)
    y = np.asarray(binary_labels).astype(bool)
    if values.shape != y.shape:
        raise ContractError(f"{values.size} scores but {y.size} labels")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError(f"ROC needs both classes, got {n_pos} positives and {n_neg} negatives")
    order = np.argsort(-values, kind="stable")
    s_sorted, y_sorted = values[order], y[order]
    # last index of each run of equal scores
    run_ends = np.flatnonzero(np.diff(s_sorted) != 0)
    run_ends = np.append(run_ends, values.size - 1)
    tp = np.cumsum(y_sorted)[run_ends]
    fp = np.cumsum(~y_sorted)[run_ends]
    tpr = np.concatenate([[0.0], tp / n_pos, [1.0]])
    fpr = np.concatenate([[0.0], fp / n_neg, [1.0]])
    thresholds = np.concatenate([[np.inf], s_sorted[run_ends], [-np.inf]])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thresholds, fpr, tpr, auc)


# ------------------------------------------------------------------ report


@dataclass
class EvalReport:
    mode: str
    class_names: list[str]
    num_samples: int
    accuracy: float
    confusion: list[list[int]]
    normalized_confusion: list[list[float]]
    empty_rows: list[int]
    per_class_accuracy: dict[str, float]
    auc: dict[str, float]
    roc: dict[str, RocCurve] = field(repr=False)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "class_names": self.class_names,
            "num_samples": self.num_samples,
            "accuracy": self.accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "auc": self.auc,
            "confusion": self.confusion,
            "normalized_confusion": self.normalized_confusion,
            "empty_rows": self.empty_rows,
            "roc": {
                name: {
                    "thresholds": [_finite_or_str(t) for t in curve.thresholds],
                    "fpr": curve.fpr.tolist(),
                    "tpr": curve.tpr.tolist(),
                }
                for name, curve in self.roc.items()
            },
            "metadata": self.metadata,
        }


def _finite_or_str(v: float):
    return float(v) if np.isfinite(v) else ("inf" if v > 0 else "-inf")


def build_report(mode: str, probabilities, true_labels, predicted_labels=None,
                 class_names: Sequence[str] = DEFAULT_CLASS_NAMES, metadata: dict | None = None) -> EvalReport:
    """Pooled metrics for one fine-tuning mode."""
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(true_labels, dtype=int)
    predicted = np.argmax(probs, axis=1) if predicted_labels is None else np.asarray(predicted_labels, dtype=int)
    k = probs.shape[1]
    cm = confusion_matrix(labels, predicted, k, class_names)
    fractions, empty = normalize_confusion(cm)
    curves = {}
    if k == 3:
        for proj in PROJECTION_ORDER:
            curves[proj.value] = roc_and_auc(*binary_scores(probs, labels, proj))
    meta = {"binary_scores": {p.value: d for p, d in PROJECTION_SCORES.items()}} if k == 3 else {}
    meta.update(metadata or {})
    return EvalReport(
        mode=str(mode),
        class_names=list(class_names),
        num_samples=int(labels.size),
        accuracy=accuracy(cm),
        confusion=cm.counts.tolist(),
        normalized_confusion=fractions.tolist(),
        empty_rows=empty,
        per_class_accuracy={name: float(fractions[i, i]) for i, name in enumerate(class_names)},
        auc={name: c.auc for name, c in curves.items()},
        roc=curves,
        metadata=meta,
    )


def format_table(reports: Sequence[EvalReport]) -> str:
    """Plain-text table with one row per mode: ACC and the three AUCs."""
    header = f"{'method':<10} {'ACC':>6} {'AUC prob. 1':>12} {'AUC prob. 2':>12} {'AUC prob. 3':>12}"
    lines = [header, "-" * len(header)]
    for r in reports:
        aucs = [r.auc.get(p.value, float("nan")) for p in PROJECTION_ORDER]
        lines.append(f"{r.mode:<10} {r.accuracy:>6.3f} " + " ".join(f"{a:>12.3f}" for a in aucs))
    return "\n".join(lines)
