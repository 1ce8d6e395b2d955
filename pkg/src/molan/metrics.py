"""Sentiment evaluation metrics: MAE, Pearson, Acc2/F1 (Has0, Non0), Acc7, weighted/macro F1."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import DomainError


@dataclass
class MetricsReport:
    n: int
    mae: float | None = None
    corr: float | None = None
    corr_degenerate: bool = False
    acc2_has0: float | None = None
    f1_has0: float | None = None
    f1_pos_has0: float | None = None
    acc2_non0: float | None = None
    f1_non0: float | None = None
    f1_pos_non0: float | None = None
    n_non0: int = 0
    acc7: float | None = None
    accuracy: float | None = None
    weighted_f1: float | None = None
    macro_f1: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def _binary(pred_pos: np.ndarray, true_pos: np.ndarray) -> tuple[float, float, float]:
    """Accuracy, support-weighted two-class F1, positive-class F1."""
    n = true_pos.size
    tp = int(np.sum(pred_pos & true_pos))
    fp = int(np.sum(pred_pos & ~true_pos))
    fn = int(np.sum(~pred_pos & true_pos))
    tn = n - tp - fp - fn
    f1_pos = _f1(tp, fp, fn)
    f1_neg = _f1(tn, fn, fp)
    n_pos = tp + fn
    weighted = (n_pos * f1_pos + (n - n_pos) * f1_neg) / n
    return (tp + tn) / n, weighted, f1_pos


def seven_class(x: np.ndarray) -> np.ndarray:
    """Clamp to [-3, 3] and round half away from zero."""
    c = np.clip(x, -3.0, 3.0)
    return (np.sign(c) * np.floor(np.abs(c) + 0.5)).astype(np.int64)


def pearson(preds: np.ndarray, labels: np.ndarray) -> tuple[float, bool]:
    n = preds.size
    mp = math.fsum(preds) / n
    ml = math.fsum(labels) / n
    dp, dl = preds - mp, labels - ml
    sxy = math.fsum(dp * dl)
    sxx = math.fsum(dp * dp)
    syy = math.fsum(dl * dl)
    if sxx == 0.0 or syy == 0.0:
        return 0.0, True
    r = sxy / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r)), False


def _class_f1(preds: np.ndarray, labels: np.ndarray) -> tuple[float, float, float]:
    classes = sorted(set(labels.tolist()) | set(preds.tolist()))
    n = labels.size
    weighted = 0.0
    scores = []
    for c in classes:
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        f = _f1(tp, fp, fn)
        scores.append(f)
        weighted += (tp + fn) * f
    return int(np.sum(preds == labels)) / n, weighted / n, sum(scores) / len(scores)


def compute(preds, labels, mode: str = "regression") -> MetricsReport:
    """All applicable metrics for one prediction set.

    In classification mode ``preds`` may be class indices or (N, C) logits.
    """
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if labels.size == 0:
        raise DomainError("metrics need at least one sample")
    if mode == "classification":
        if preds.ndim == 2 and preds.shape[1] > 1:
            preds = preds.argmax(axis=1)
        preds = preds.reshape(-1)
        if preds.size != labels.size:
            raise DomainError(f"{preds.size} predictions vs {labels.size} labels")
        acc, wf1, mf1 = _class_f1(preds.astype(np.int64), labels.astype(np.int64))
        return MetricsReport(n=labels.size, accuracy=acc, weighted_f1=wf1, macro_f1=mf1)
    if mode != "regression":
        raise DomainError(f"unknown metrics mode {mode!r}")
    preds = preds.reshape(-1)
    if preds.size != labels.size:
        raise DomainError(f"{preds.size} predictions vs {labels.size} labels")
    n = labels.size
    report = MetricsReport(n=n)
    report.mae = math.fsum(np.abs(labels - preds)) / n
    report.corr, report.corr_degenerate = pearson(preds, labels)
    report.acc2_has0, report.f1_has0, report.f1_pos_has0 = _binary(preds >= 0, labels >= 0)
    nz = labels != 0
    report.n_non0 = int(nz.sum())
    if report.n_non0:
        report.acc2_non0, report.f1_non0, report.f1_pos_non0 = _binary(preds[nz] > 0, labels[nz] > 0)
    report.acc7 = int(np.sum(seven_class(preds) == seven_class(labels))) / n
    return report
