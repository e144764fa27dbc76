"""Accuracy, rank-based ROC AUC and the Mann-Whitney U test."""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np
from scipy.stats import norm, rankdata

from ..errors import UndefinedAUCError

EXACT_PAIR_LIMIT = 400


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.size == 0:
        raise ValueError("accuracy of an empty prediction set")
    if pred.shape != lab.shape:
        raise ValueError(f"{pred.size} predictions for {lab.size} labels")
    return float(np.mean(pred == lab))


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """AUC through the Mann-Whitney identity; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores for {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC is undefined when only one class is present")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


class MannWhitneyResult(NamedTuple):
    u: float  # statistic for the first sample
    p: float  # two-sided
    method: str  # "exact" | "normal"


def mann_whitney_u(a: Sequence[float], b: Sequence[float], method: str = "auto") -> MannWhitneyResult:
    """Two-sided Mann-Whitney U test with average ranks for ties.

    ``method="auto"`` enumerates the exact permutation distribution of the
    (tied) rank sums when ``len(a) * len(b) <= 400`` and otherwise uses the
    normal approximation with tie and continuity corrections.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    na, nb = x.size, y.size
    if na == 0 or nb == 0:
        raise ValueError("Mann-Whitney U needs two non-empty samples")
    ranks = rankdata(np.concatenate([x, y]))
    u = float(ranks[:na].sum() - na * (na + 1) / 2.0)
    if method == "auto":
        method = "exact" if na * nb <= EXACT_PAIR_LIMIT else "normal"
    if method == "exact":
        p = _exact_p(ranks, na)
    elif method == "normal":
        p = _normal_p(u, ranks, na, nb)
    else:
        raise ValueError(f"unknown method {method!r}")
    return MannWhitneyResult(u, p, method)


def _normal_p(u: float, ranks: np.ndarray, na: int, nb: int) -> float:
    n = na + nb
    _, counts = np.unique(ranks, return_counts=True)
    tie_term = float(((counts ** 3) - counts).sum())
    var = na * nb / 12.0 * ((n + 1) - tie_term / (n * (n - 1))) if n > 1 else 0.0
    if var <= 0:
        return 1.0
    z = max(abs(u - na * nb / 2.0) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2.0 * norm.sf(z)))


def _exact_p(ranks: np.ndarray, na: int) -> float:
    """Permutation p-value of the rank sum of ``na`` draws from the pooled ranks.

    Doubled average ranks are integers, so the rank-sum distribution is
    counted exactly by dynamic programming over (subset size, doubled sum).
    """
    n = ranks.size
    doubled = np.rint(2 * ranks).astype(np.int64)
    k = min(na, n - na)
    # the sum over the smaller side determines the other side, and
    # |R_small - E| ranks identically, so count with the smaller subset
    observed = int(doubled[:na].sum()) if k == na else int(doubled[na:].sum())
    expected2 = k * (n + 1)  # doubled expected rank sum
    total_sum = int(doubled.sum())
    counts = np.zeros((k + 1, total_sum + 1))
    counts[0, 0] = 1.0
    for r in doubled:
        # iterate sizes downward so each item is used at most once
        for j in range(k, 0, -1):
            counts[j, r:] += counts[j - 1, : total_sum + 1 - r]
    dist = counts[k]
    sums = np.arange(total_sum + 1)
    extreme = np.abs(sums - expected2) >= abs(observed - expected2)
    return float(min(1.0, dist[extreme].sum() / dist.sum()))
