"""Open-set decision rule and UniDA metrics (accuracy, H-score, CCR/FPR, UCR).

Labels use ``K`` (the number of known classes) for UNKNOWN.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import DomainError
from .model import Network, closed_probs, extract_features, open_scores


@dataclass
class Predictions:
    """Batch of prediction records; ``predicted == K`` means UNKNOWN."""
    closed_probs: np.ndarray
    open_pos: np.ndarray
    predicted: np.ndarray
    closed_argmax: np.ndarray
    score: np.ndarray  # open positive score of the closed argmax class
    true_label: Optional[np.ndarray] = None

    @property
    def num_known(self) -> int:
        return self.closed_probs.shape[1]


def decide(closed_probs_rows, open_pos_rows, threshold: float = 0.5, true_label=None) -> Predictions:
    """Closed argmax picks the class; only that class's open score gates known vs unknown."""
    if not 0.0 < threshold < 1.0:
        raise DomainError("threshold must lie in (0, 1)")
    pc = np.atleast_2d(np.asarray(closed_probs_rows, dtype=np.float64))
    po = np.atleast_2d(np.asarray(open_pos_rows, dtype=np.float64))
    k = pc.shape[1]
    top = np.argmax(pc, axis=1)
    score = po[np.arange(pc.shape[0]), top]
    predicted = np.where(score >= threshold, top, k)
    if true_label is not None:
        true_label = np.atleast_1d(np.asarray(true_label, dtype=np.int64))
    return Predictions(pc, po, predicted, top, score, true_label)


def predict(net: Network, x, threshold: float = 0.5, true_label=None) -> Predictions:
    z = extract_features(net, x)
    return decide(closed_probs(net, z), open_scores(net, z), threshold, true_label)


def accuracy(predicted, true_label) -> float:
    predicted, true_label = np.asarray(predicted), np.asarray(true_label)
    if predicted.size == 0:
        raise DomainError("accuracy of an empty prediction set")
    return float(np.mean(predicted == true_label))


def known_unknown_accuracy(predicted, true_label, num_known: int):
    """Per-class accuracies of target-present known classes and the unknown accuracy."""
    predicted, true_label = np.asarray(predicted), np.asarray(true_label)
    present = [c for c in range(num_known) if np.any(true_label == c)]
    per_class = np.array([np.mean(predicted[true_label == c] == c) for c in present])
    unknown = true_label == num_known
    a_u = float(np.mean(predicted[unknown] == num_known)) if unknown.any() else None
    return present, per_class, a_u


def harmonic(a_k: float, a_u: float) -> float:
    if a_k + a_u == 0:
        return 0.0
    return 2.0 * a_k * a_u / (a_k + a_u)


def h_score(predicted, true_label, num_known: int) -> Tuple[float, float, float]:
    """Returns ``(H, a_known, a_unknown)``."""
    present, per_class, a_u = known_unknown_accuracy(predicted, true_label, num_known)
    if not present or a_u is None:
        raise DomainError("H-score needs both known-class and unknown-class target samples")
    a_k = float(per_class.mean())
    return harmonic(a_k, a_u), a_k, a_u


def ccr_fpr_curve(closed_argmax, score, true_label, num_known: int):
    """CCR and FPR over every distinct score threshold plus 0 and 1.

    Returns ``(points, ucr)`` with points ``(threshold, ccr, fpr)`` in
    ascending threshold order and UCR the trapezoid area over FPR.
    """
    closed_argmax, score, true_label = map(np.asarray, (closed_argmax, score, true_label))
    unknown = true_label == num_known
    if not unknown.any():
        raise DomainError("CCR/FPR needs unknown-class samples")
    known = ~unknown
    correct = known & (closed_argmax == true_label)
    thresholds = np.unique(np.concatenate([score, [0.0, 1.0]]))
    if thresholds[-1] <= score.max():
        thresholds = np.append(thresholds, np.nextafter(score.max(), np.inf))
    n_known, n_unknown = max(int(known.sum()), 1), int(unknown.sum())
    # counts of scores >= theta via sorted search
    ks = np.sort(score[correct])
    us = np.sort(score[unknown])
    ccr = (ks.size - np.searchsorted(ks, thresholds, side="left")) / n_known
    fpr = (us.size - np.searchsorted(us, thresholds, side="left")) / n_unknown
    points = list(zip(thresholds.tolist(), ccr.tolist(), fpr.tolist()))
    order = np.lexsort((ccr, fpr))
    ucr = float(np.trapezoid(ccr[order], fpr[order]))
    return points, ucr


@dataclass
class MetricsReport:
    accuracy: float
    closed_accuracy: float
    known_classes: List[int]
    per_class_known_acc: List[float]
    a_known: float
    a_unknown: Optional[float] = None
    h_score: Optional[float] = None
    ucr: Optional[float] = None
    curve: List[Tuple[float, float, float]] = field(default_factory=list)


def evaluate_predictions(pred: Predictions) -> MetricsReport:
    k = pred.num_known
    y = pred.true_label
    present, per_class, a_u = known_unknown_accuracy(pred.predicted, y, k)
    a_k = float(per_class.mean()) if present else 0.0
    knowns = y < k
    closed_acc = float(np.mean(pred.closed_argmax[knowns] == y[knowns])) if knowns.any() else 0.0
    report = MetricsReport(
        accuracy=accuracy(pred.predicted, y),
        closed_accuracy=closed_acc,
        known_classes=present,
        per_class_known_acc=per_class.tolist(),
        a_known=a_k,
        a_unknown=a_u,
    )
    if a_u is not None and present:
        report.h_score = harmonic(a_k, a_u)
        report.curve, report.ucr = ccr_fpr_curve(pred.closed_argmax, pred.score, y, k)
    return report


def evaluate_network(net: Network, target, threshold: float = 0.5) -> MetricsReport:
    """Metrics of ``net`` on a target dataset (target-private classes count as UNKNOWN)."""
    return evaluate_predictions(predict(net, target.features, threshold, target.eval_labels()))


METRICS_HEADER = ["setting", "seed", "a_known", "a_unknown", "h_score", "accuracy", "ucr"]


def _fmt(v):
    return "" if v is None else repr(float(v))


def metrics_row(report: MetricsReport, setting: str, seed: int) -> list:
    return [setting, seed, _fmt(report.a_known), _fmt(report.a_unknown), _fmt(report.h_score),
            _fmt(report.accuracy), _fmt(report.ucr)]


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(rows)


def write_curve_csv(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "ccr", "fpr"])
        for t, c, f in curve:
            w.writerow([repr(t), repr(c), repr(f)])
