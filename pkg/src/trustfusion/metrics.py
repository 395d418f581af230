"""Reliability metrics for multi-view predictions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionRecord:
    """Column-wise records for M instances.

    ``view_labels`` and ``view_dot`` are (M, V); the rest are (M,).
    """

    fused_label: np.ndarray
    fused_uncertainty: np.ndarray
    true_label: np.ndarray
    view_labels: np.ndarray
    view_dot: np.ndarray

    def __len__(self) -> int:
        return len(self.true_label)


def top1(records: PredictionRecord) -> float:
    if len(records) == 0:
        raise MetricError("no records")
    return float(np.mean(records.fused_label == records.true_label))


def _category_counts(view_labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(view_labels, dtype=np.int64)
    counts = np.zeros((labels.shape[0], k), dtype=np.int64)
    rows = np.repeat(np.arange(labels.shape[0]), labels.shape[1])
    np.add.at(counts, (rows, labels.ravel()), 1)
    return counts


def fleiss_kappa(view_labels, k: int) -> float:
    """Fleiss' kappa treating each column (view) as a rater."""
    labels = np.asarray(view_labels)
    if labels.ndim != 2 or labels.shape[0] < 2 or labels.shape[1] < 2:
        raise MetricError("need an M x V label matrix with M >= 2 and V >= 2")
    if labels.min() < 0 or labels.max() >= k:
        raise MetricError(f"labels must lie in [0, {k})")
    m, n = labels.shape
    counts = _category_counts(labels, k)
    p_item = ((counts * counts).sum(axis=1) - n) / (n * (n - 1))
    p_bar = p_item.mean()
    p_cat = counts.sum(axis=0) / (m * n)
    p_e = float((p_cat**2).sum())
    if p_bar == 1.0:
        return 1.0
    if p_e == 1.0:
        raise MetricError("kappa undefined: chance agreement is 1 but observed agreement is not")
    return float((p_bar - p_e) / (1.0 - p_e))


def mvagt(records: PredictionRecord, v: int | None = None) -> float:
    """Share of instances where strictly more than V/2 views hit the truth."""
    if len(records) == 0:
        raise MetricError("no records")
    views = np.asarray(records.view_labels)
    v = views.shape[1] if v is None else v
    hits = (views == np.asarray(records.true_label)[:, None]).sum(axis=1)
    return float(np.mean(hits > v / 2))


def auroc_uncertainty(records: PredictionRecord) -> float:
    """AUROC of fused uncertainty for flagging wrong predictions (ties count 1/2)."""
    positive = np.asarray(records.fused_label) != np.asarray(records.true_label)
    return auroc(np.asarray(records.fused_uncertainty, dtype=np.float64), positive)


def auroc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Rank-based (Mann-Whitney) AUROC with average ranks for ties."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both positive and negative records")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    # average 1-based rank within each run of equal scores
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], scores.size]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + 1 + e)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def conflict_ratio(labels_a, labels_b) -> float:
    a, b = np.asarray(labels_a), np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise MetricError("conflict ratio needs two non-empty label vectors of equal length")
    return float(np.mean(a != b))


def conflict_matrix(view_labels) -> np.ndarray:
    labels = np.asarray(view_labels)
    v = labels.shape[1]
    out = np.zeros((v, v))
    for i in range(v):
        for j in range(i + 1, v):
            out[i, j] = out[j, i] = conflict_ratio(labels[:, i], labels[:, j])
    return out


def summarize(records: PredictionRecord, k: int, rater_views=None) -> dict[str, float]:
    """All scalar metrics; ``rater_views`` selects the kappa/MVAGT columns."""
    views = np.asarray(records.view_labels)
    cols = list(range(views.shape[1])) if rater_views is None else list(rater_views)
    sub = PredictionRecord(
        records.fused_label,
        records.fused_uncertainty,
        records.true_label,
        views[:, cols],
        np.asarray(records.view_dot)[:, cols],
    )
    out = {"top1": top1(records), "mvagt": mvagt(sub)}
    out["fleiss_kappa"] = fleiss_kappa(sub.view_labels, k) if len(cols) >= 2 else float("nan")
    try:
        out["auroc"] = auroc_uncertainty(records)
    except MetricError:
        out["auroc"] = float("nan")
    return out
