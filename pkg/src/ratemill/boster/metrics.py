"""Classification metrics for PD models."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

DEFAULT_BETA = 1.143


@dataclass
class MetricReport:
    auc: float
    recall: float
    specificity: float
    f_beta: float
    f1: float
    average_precision: float
    confusion: list  # [[tn, fp], [fn, tp]]
    threshold: float
    beta: float = DEFAULT_BETA

    @property
    def n(self) -> int:
        return int(sum(sum(r) for r in self.confusion))

    def normalized_confusion(self) -> list:
        out = []
        for row in self.confusion:
            total = sum(row)
            out.append([v / total if total else 0.0 for v in row])
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["normalized_confusion"] = self.normalized_confusion()
        return d


def f_beta(specificity: float, recall: float, beta: float) -> float:
    """Weighted harmonic mean of specificity and recall; beta < 1 favours specificity."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    b2 = beta * beta
    den = b2 * specificity + recall
    if den == 0:
        return 0.0
    # grouping recall/den makes beta = 0 return the specificity bit-for-bit
    return (1.0 + b2) * specificity * (recall / den)


def auc(scores, targets) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(targets)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined for a single-class target")
    ranks = rankdata(scores)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, targets) -> float:
    """Step-wise area under the precision-recall curve; tied scores form one step."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(targets).astype(np.float64)
    n_pos = y.sum()
    if n_pos == 0:
        raise ValueError("average precision undefined without positives")
    order = np.argsort(-scores, kind="mergesort")
    s, yy = scores[order], y[order]
    tp = np.cumsum(yy)
    fp = np.cumsum(1.0 - yy)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def confusion(scores, targets, threshold: float = 0.5) -> list:
    pred = np.asarray(scores) >= threshold
    y = np.asarray(targets) == 1
    tn = int((~pred & ~y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    tp = int((pred & y).sum())
    return [[tn, fp], [fn, tp]]


def report(scores, targets, threshold: float = 0.5, beta: float = DEFAULT_BETA) -> MetricReport:
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    y = np.asarray(targets)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("targets must be binary")
    cm = confusion(scores, y, threshold)
    (tn, fp), (fn, tp) = cm
    recall = tp / (tp + fn) if tp + fn else 0.0
    specificity = tn / (tn + fp) if tn + fp else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    both = 0 < tp + fn < len(y)
    # ranking metrics are undefined on a single-class sample; report them as nan
    return MetricReport(
        auc=auc(scores, y) if both else float("nan"),
        recall=recall,
        specificity=specificity,
        f_beta=f_beta(specificity, recall, beta),
        f1=f1,
        average_precision=average_precision(scores, y) if both else float("nan"),
        confusion=cm,
        threshold=threshold,
        beta=beta,
    )


def evaluate(model, rows, targets=None, threshold: float = 0.5, beta: float = DEFAULT_BETA) -> MetricReport:
    """Score ``rows`` with ``model`` and report metrics against ``targets``."""
    from .trees import predict_proba

    if targets is None:
        targets = rows.target
    return report(predict_proba(model, rows), targets, threshold, beta)
