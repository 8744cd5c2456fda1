"""Performance and group-fairness metrics.

Group encoding: ``group == 1`` is the first-named group (M in the
gender case), so every gap is ``rate(group 1) - rate(group 0)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .exceptions import UndefinedMetricError


def _as_binary(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.size and not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1)")
    return a.astype(np.int64)


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties 1/2).

    Computed from mid-ranks (Mann-Whitney U / (n_pos * n_neg)).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = _as_binary(labels, "labels").ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative label")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mean_auroc_multilabel(scores, labels) -> tuple[float, list[int]]:
    """Unweighted mean AUROC over label columns.

    Columns with a single class are skipped (with a warning); their indices
    are returned alongside the mean.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    values, skipped = [], []
    for j in range(labels.shape[1]):
        try:
            values.append(auroc(scores[:, j], labels[:, j]))
        except UndefinedMetricError:
            skipped.append(j)
    if skipped:
        warnings.warn(f"skipping single-class label columns {skipped}", RuntimeWarning,
                      stacklevel=2)
    if not values:
        raise UndefinedMetricError("every label column has a single class")
    return float(np.mean(values)), skipped


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise UndefinedMetricError("accuracy of an empty set")
    return float(((scores >= threshold).astype(np.int64) == labels).mean())


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def max_f1_threshold(scores, labels) -> tuple[float, float]:
    """Threshold maximizing F1 (predict positive when ``score >= t``).

    Candidates are the midpoints between consecutive distinct scores plus
    one point below the minimum; ties go to the lowest threshold.
    Returns ``(threshold, f1)``.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = _as_binary(labels, "labels").ravel()
    if labels.sum() == 0:
        raise UndefinedMetricError("F1 is undefined without positive labels")
    uniq = np.unique(scores)
    below = uniq[0] - (1.0 if len(uniq) == 1 else (uniq[1] - uniq[0]) / 2.0)
    cands = np.concatenate([[below], (uniq[:-1] + uniq[1:]) / 2.0])
    # counts of positives / negatives with score >= each candidate
    order = np.sort(scores)
    pos_sorted = np.sort(scores[labels == 1])
    n_pos = len(pos_sorted)
    ge_all = len(order) - np.searchsorted(order, cands, side="left")
    tp = n_pos - np.searchsorted(pos_sorted, cands, side="left")
    fp = ge_all - tp
    fn = n_pos - tp
    f1 = _f1(tp.astype(float), fp.astype(float), fn.astype(float))
    best = int(np.argmax(f1))  # first maximum = lowest threshold
    return float(cands[best]), float(f1[best])


@dataclass
class GroupConfusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def tpr(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else float("nan")

    @property
    def tnr(self) -> float:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else float("nan")


def group_confusion(scores, labels, group, threshold: float) -> dict[int, GroupConfusion]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = _as_binary(labels, "labels").ravel()
    group = _as_binary(group, "group").ravel()
    pred = scores >= threshold
    out = {}
    for g in (0, 1):
        m = group == g
        y, p = labels[m] == 1, pred[m]
        out[g] = GroupConfusion(int((p & y).sum()), int((p & ~y).sum()),
                                int((~p & ~y).sum()), int((~p & y).sum()))
    return out


def mcc(pred, attr) -> float:
    """Matthews correlation between two binary vectors; 0 if a margin is degenerate."""
    pred = _as_binary(pred, "pred").ravel()
    attr = _as_binary(attr, "attr").ravel()
    tp = float(((pred == 1) & (attr == 1)).sum())
    tn = float(((pred == 0) & (attr == 0)).sum())
    fp = float(((pred == 1) & (attr == 0)).sum())
    fn = float(((pred == 0) & (attr == 1)).sum())
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


@dataclass
class FairnessReport:
    tpr_gap: float
    tnr_gap: float
    mcc_pred_attr: float
    threshold: float
    confusion: dict

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = {str(g): asdict(c) if not isinstance(c, dict) else c
                          for g, c in self.confusion.items()}
        return d


def fairness_report(scores, labels, group, threshold: float | None = None) -> FairnessReport:
    """TPR/TNR gaps (group 1 minus group 0) and MCC(prediction, group).

    The threshold defaults to the max-F1 threshold on the same data.
    """
    if threshold is None:
        threshold, _ = max_f1_threshold(scores, labels)
    conf = group_confusion(scores, labels, group, threshold)
    pred = (np.asarray(scores, dtype=np.float64).ravel() >= threshold).astype(np.int64)
    return FairnessReport(
        tpr_gap=conf[1].tpr - conf[0].tpr,
        tnr_gap=conf[1].tnr - conf[0].tnr,
        mcc_pred_attr=mcc(pred, group),
        threshold=float(threshold),
        confusion=conf,
    )


def aggregate_runs(values) -> tuple[float, float]:
    """Mean and sample standard deviation (std 0, with a warning, for one value)."""
    values = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if values.size == 0:
        return float("nan"), float("nan")
    if values.size == 1:
        warnings.warn("standard deviation of a single run reported as 0", RuntimeWarning,
                      stacklevel=2)
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1))


def format_mean_std(mean: float, std: float) -> str:
    if not math.isfinite(mean):
        return "n/a"
    return f"{mean:.3f}±{std:.3f}"
