"""AUC via rank statistics and relative AUC improvement."""

import numpy as np

from .errors import UndefinedMetricError, ZeroBaselineError


def average_ranks(x):
    """1-based ranks with tied values sharing the mean of their positions."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(xs)]
    ranks = np.empty(len(xs))
    ranks[order] = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    return ranks


def auc(scores, labels):
    """P(random positive outscores random negative), ties counted as ½."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise UndefinedMetricError(f"scores {scores.shape} and labels {labels.shape} differ")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    rank_sum = average_ranks(scores)[pos].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def rela_impr(auc_model, auc_base):
    """Relative improvement over ``auc_base`` in percent (unrounded)."""
    if auc_base == 0.5:
        raise ZeroBaselineError("RelaImpr is undefined for a base AUC of 0.5")
    return ((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0


def format_percent(value):
    return f"{value:.2f}%"
