"""Ranking metrics for mislabeled-sample detection, relabeling and recall."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "orient",
    "roc_auc",
    "average_precision",
    "relabel_from_scores",
    "relabel",
    "relabel_all",
    "recall_at_s",
    "pseudo_label",
    "MetricsReport",
]

_HIGH = {"higher_is_noisier", "higher", "higher_is_positive", "largest"}
_LOW = {"lower_is_noisier", "lower", "lower_is_positive", "smallest"}


def orient(scores, direction) -> np.ndarray:
    """Flip ``scores`` so that larger always means "more positive class"."""
    s = np.asarray(scores, dtype=np.float64)
    if direction in _HIGH:
        return s
    if direction in _LOW:
        return -s
    raise ValueError(f"unknown direction {direction!r}")


def _check_binary(scores, flags):
    s = np.asarray(scores, dtype=np.float64)
    f = np.asarray(flags).astype(bool)
    if s.shape != f.shape or s.ndim != 1:
        raise ValueError("scores and flags must be 1-D of equal length")
    n_pos = int(f.sum())
    if n_pos == 0 or n_pos == f.size:
        raise ValueError("need at least one positive and one negative sample")
    return s, f


def roc_auc(scores, positive_flags, direction="higher_is_noisier") -> float:
    """Mann-Whitney AUC: P(random positive outranks random negative), ties count 1/2."""
    s, f = _check_binary(orient(scores, direction), positive_flags)
    ranks = rankdata(s)  # average ranks handle ties
    n_pos = f.sum()
    n_neg = f.size - n_pos
    u = ranks[f].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, positive_flags, direction="higher_is_noisier") -> float:
    """Non-interpolated AP: mean precision at the rank of each positive.

    Tied scores are treated as one threshold, so every positive in a tie
    block receives the precision measured at the end of that block.
    """
    s, f = _check_binary(orient(scores, direction), positive_flags)
    order = np.argsort(-s, kind="stable")
    s, f = s[order], f[order]
    tp = np.cumsum(f)
    # last index of each block of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp_end = tp[ends]
    precision = tp_end / (ends + 1.0)
    gained = np.diff(np.r_[0, tp_end])
    return float(np.sum(gained * precision) / f.sum())


def relabel_from_scores(candidate_scores, direction="lower_is_noisier"):
    """Pick the most helpful candidate label; returns ``(label, tie)``.

    For signed estimators the most helpful label has the largest score; for
    ``higher_is_noisier`` estimators it has the smallest. Exact ties go to
    the smallest class index.
    """
    helpful = -orient(candidate_scores, direction)
    best = int(np.argmax(helpful))
    tie = int(np.sum(helpful == helpful[best])) > 1
    return best, tie


def relabel(x, K, context):
    if K < 2:
        raise ValueError("K must be >= 2")
    X = np.repeat(np.atleast_2d(np.asarray(x, dtype=np.float64)), K, axis=0)
    try:
        scores = context.score(X, np.arange(K))
    except Exception as exc:
        raise RuntimeError(f"scorer failed on candidate labels 0..{K - 1}: {exc}") from exc
    return relabel_from_scores(scores, context.direction)


def relabel_all(X, K, context):
    """Relabel every row of ``X``; returns ``(labels, tie_flags)``.

    Costs ``K`` scorings per sample.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    cand = np.empty((n, K))
    for k in range(K):
        cand[:, k] = context.score(X, np.full(n, k))
    helpful = -orient(cand, context.direction)
    labels = np.argmax(helpful, axis=1)
    ties = np.sum(helpful == helpful[np.arange(n), labels][:, None], axis=1) > 1
    return labels, ties


def recall_at_s(per_val_scores, train_labels, val_label, s, direction="largest") -> float:
    """Fraction of the ``s`` extreme-ranked training points that share ``val_label``.

    ``direction`` names which end holds the most influential points:
    ``largest`` or ``smallest``.
    """
    scores = np.asarray(per_val_scores, dtype=np.float64)
    labels = np.asarray(train_labels)
    if s < 1 or s > scores.size:
        raise ValueError(f"s={s} outside [1, {scores.size}]")
    order = np.argsort(-orient(scores, direction), kind="stable")
    return float(np.mean(labels[order[:s]] == val_label))


def pseudo_label(train_labels, val_label) -> np.ndarray:
    return (np.asarray(train_labels) == val_label).astype(np.int64)


@dataclass
class MetricsReport:
    roc_auc: float
    average_precision: float
    relabel_top1: float | None = None
    recall_at_s: float | None = None
    per_seed: list = field(default_factory=list)
    mean_std: dict = field(default_factory=dict)

    @classmethod
    def aggregate(cls, per_seed):
        """Build a report whose headline numbers are means over ``per_seed`` dicts."""
        if not per_seed:
            raise ValueError("no per-seed results to aggregate")
        keys = ("roc_auc", "average_precision", "relabel_top1", "recall_at_s")
        stats = {}
        for k in keys:
            vals = [r[k] for r in per_seed if r.get(k) is not None]
            if vals:
                stats[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
        mean = {k: (v["mean"] if v else None) for k, v in ((k, stats.get(k)) for k in keys)}
        return cls(mean["roc_auc"], mean["average_precision"], mean["relabel_top1"],
                   mean["recall_at_s"], list(per_seed), stats)

    def to_json(self):
        return {
            "version": "iflab-metrics-1",
            "roc_auc": self.roc_auc,
            "average_precision": self.average_precision,
            "relabel_top1": self.relabel_top1,
            "recall_at_s": self.recall_at_s,
            "per_seed": self.per_seed,
            "mean_std": self.mean_std,
        }
