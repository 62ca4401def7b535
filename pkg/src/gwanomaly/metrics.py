"""Loss and evaluation metrics for the binary background/signal task.

Scores are probabilities of the signal class; a sample is called positive
iff ``score > threshold`` (strict).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .errors import DomainError, ShapeError, UndefinedMetricError

CE_EPS = 1e-7


def _check_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and not np.all((labels == 0) | (labels == 1)):
        raise DomainError("labels must be 0 or 1")
    return labels.astype(np.int64)


def cross_entropy(probs: DiffArray, labels, eps: float = CE_EPS) -> DiffArray:
    """Mean of ``-log p[label]`` with probabilities clamped to ``[eps, 1 - eps]``.

    Clamped entries carry zero gradient.
    """
    labels = _check_labels(labels)
    if probs.ndim != 2 or probs.shape[1] != 2 or probs.shape[0] != labels.shape[0]:
        raise ShapeError(f"probabilities {probs.shape} do not match {labels.shape[0]} labels")
    n = probs.shape[0]
    if n == 0:
        raise DomainError("cross entropy of an empty batch")
    if np.any(np.abs(probs.data.sum(axis=1) - 1.0) > 1e-5):
        raise DomainError("probability rows must sum to 1")
    rows = np.arange(n)
    dt = probs.dtype.type
    p = probs.data[rows, labels]
    lo, hi = dt(eps), dt(1.0) - dt(eps)
    pc = np.clip(p, lo, hi)
    out = np.asarray(-np.log(pc).mean(dtype=probs.dtype), dtype=probs.dtype)
    inside = (p > lo) & (p < hi)

    def bw(g, needs):
        grad = np.zeros_like(probs.data)
        grad[rows, labels] = np.where(inside, -g / (n * pc), 0)
        return (grad,)

    return ad.record("cross_entropy", (probs,), out, bw)


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    labels = _check_labels(labels)
    if labels.size == 0:
        raise UndefinedMetricError("accuracy of an empty set")
    return float(np.mean((np.asarray(scores) > threshold) == (labels == 1)))


def confusion(scores, labels, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """Return ``(TP, FP, TN, FN)``."""
    labels = _check_labels(labels)
    pred = np.asarray(scores) > threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    return tp, fp, tn, fn


def tnr(tn: int, fp: int) -> float:
    if tn + fp == 0:
        raise UndefinedMetricError("TNR undefined without negative samples")
    return tn / (tn + fp)


def tpr(tp: int, fn: int) -> float:
    if tp + fn == 0:
        raise UndefinedMetricError("TPR undefined without positive samples")
    return tp / (tp + fn)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # point k is reached by the rule score > thresholds[k]

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.fpr, self.tpr])


def roc_curve(scores, labels) -> RocCurve:
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_labels(labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr_ = np.r_[0.0, tps / n_pos]
    distinct = s[last]
    thresholds = np.r_[np.inf, distinct[1:], -np.inf]
    return RocCurve(fpr, tpr_, thresholds)


def roc_auc(scores, labels) -> tuple[np.ndarray, float]:
    """ROC points ``(fpr, tpr)`` and the trapezoidal area under them.

    Equal scores form a single threshold step, which gives tied
    positive/negative pairs half credit.
    """
    curve = roc_curve(scores, labels)
    dx = np.diff(curve.fpr)
    auc = float(np.sum(dx * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0))
    return curve.points, auc


def pairwise_auc(scores, labels, chunk: int = 4096) -> float:
    """Brute-force P(score_pos > score_neg) + 0.5 P(tie) over all pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_labels(labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    total = 0.0
    for start in range(0, pos.size, chunk):
        p = pos[start:start + chunk, None]
        total += np.sum(p > neg[None, :]) + 0.5 * np.sum(p == neg[None, :])
    return float(total / (pos.size * neg.size))


def tnr_at_tpr(scores, labels, min_tpr: float = 0.9) -> tuple[float, float]:
    """Best TNR over thresholds whose TPR reaches ``min_tpr``.

    Returns ``(tnr, threshold)`` where positives are ``score > threshold``.
    """
    curve = roc_curve(scores, labels)
    k = int(np.argmax(curve.tpr >= min_tpr - 1e-12))
    return 1.0 - float(curve.fpr[k]), float(curve.thresholds[k])


@dataclass
class EvalReport:
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    tnr: Optional[float]
    tpr: Optional[float]
    accuracy: float
    roc_points: Optional[np.ndarray] = None
    auc: Optional[float] = None
    tnr_at_tpr90: Optional[float] = None
    threshold_at_tpr90: Optional[float] = None
    extra: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_text(self) -> str:
        def fmt(v):
            if v is None:
                return "NA"
            if isinstance(v, float):
                return repr(v)
            return str(v)

        rows = [
            ("n", self.n), ("threshold", self.threshold),
            ("TP", self.tp), ("FP", self.fp), ("TN", self.tn), ("FN", self.fn),
            ("tnr", self.tnr), ("tpr", self.tpr), ("accuracy", self.accuracy),
            ("auc", self.auc), ("tnr_at_tpr90", self.tnr_at_tpr90),
            ("threshold_at_tpr90", self.threshold_at_tpr90),
        ]
        rows += sorted(self.extra.items())
        return "".join(f"{k}={fmt(v)}\n" for k, v in rows)

    def roc_csv(self) -> str:
        if self.roc_points is None:
            return "fpr,tpr\n"
        return "fpr,tpr\n" + "".join(f"{f:.9g},{t:.9g}\n" for f, t in self.roc_points)

    def write(self, report_path, roc_path=None) -> None:
        Path(report_path).write_text(self.to_text(), encoding="utf-8")
        if roc_path is not None and self.roc_points is not None:
            Path(roc_path).write_text(self.roc_csv(), encoding="utf-8")


def parse_report(text: str) -> dict:
    """Inverse of :meth:`EvalReport.to_text` into a plain dict."""
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        if value == "NA":
            out[key] = None
            continue
        try:
            out[key] = int(value)
        except ValueError:
            try:
                out[key] = float(value)
            except ValueError:
                out[key] = value
    return out


def build_report(scores, labels, threshold: float = 0.5, with_roc: bool = True) -> EvalReport:
    """Assemble every metric; ROC fields stay None when ``with_roc`` is False.

    Raises UndefinedMetricError if ROC is requested on single-class data.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_labels(labels)
    tp, fp, tn, fn = confusion(scores, labels, threshold)
    report = EvalReport(
        threshold=float(threshold), tp=tp, fp=fp, tn=tn, fn=fn,
        tnr=tnr(tn, fp) if tn + fp else None,
        tpr=tpr(tp, fn) if tp + fn else None,
        accuracy=accuracy(scores, labels, threshold),
    )
    if with_roc:
        report.roc_points, report.auc = roc_auc(scores, labels)
        report.tnr_at_tpr90, report.threshold_at_tpr90 = tnr_at_tpr(scores, labels, 0.9)
    return report
