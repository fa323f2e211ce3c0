"""Threshold-free evaluation metrics: AUROC, AUPR, and the relative area
under the lift curve (rAULC).

Tie conventions are fixed explicitly because near-chance scorers produce
many ties: AUROC counts tied pairs as 0.5; AUPR and the lift curve break
ties by stable input order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DomainError


def _as_scores(values, side: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise DomainError(f"{side} side must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{side} scores must be finite")
    return arr


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(positives, negatives) -> float:
    """Probability that a random positive outscores a random negative,
    counting ties as 0.5. Rank-based, exactly equal to the pairwise count."""
    pos = _as_scores(positives, "positive")
    neg = _as_scores(negatives, "negative")
    ranks = _average_ranks(np.concatenate([pos, neg]))
    rank_sum = float(ranks[: pos.size].sum())
    u = rank_sum - pos.size * (pos.size + 1) / 2.0
    return u / (pos.size * neg.size)


def auroc_pairwise(positives, negatives) -> float:
    """Exhaustive O(|P|*|N|) definition; the oracle auroc() must match."""
    pos = _as_scores(positives, "positive")
    neg = _as_scores(negatives, "negative")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (float(wins) + 0.5 * float(ties)) / (pos.size * neg.size)


def aupr(positives, negatives) -> float:
    """Average precision over descending scores, positives = 1.

    The combined ordering is positives-then-negatives before a stable
    descending sort, which fixes how ties resolve.
    """
    pos = _as_scores(positives, "positive")
    neg = _as_scores(negatives, "negative")
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(pos.size, bool), np.zeros(neg.size, bool)])
    order = np.argsort(-scores, kind="mergesort")
    ranked = labels[order]
    tp = np.cumsum(ranked)
    k = np.arange(1, ranked.size + 1)
    precision = tp / k
    return float(precision[ranked].sum() / pos.size)


@dataclass(frozen=True)
class LiftCurve:
    """Accuracy lift as low-uncertainty prefixes grow to the full set."""

    quantiles: np.ndarray
    lifts: np.ndarray
    aulc: float
    raulc: float


def _aulc(correct_sorted: np.ndarray) -> tuple[np.ndarray, float]:
    n = correct_sorted.size
    k = np.arange(1, n + 1)
    prefix_acc = np.cumsum(correct_sorted) / k
    overall = prefix_acc[-1]
    lifts = prefix_acc / overall
    return lifts, float(lifts.mean() - 1.0)


def lift_curve(correct, uncertainty) -> LiftCurve:
    """Sort by increasing uncertainty (stable) and accumulate accuracy.

    raulc = AULC / AULC of the oracle ordering (all correct first); the
    oracle scores 1 exactly, worse-than-random orderings go negative.
    """
    c = np.asarray(correct, dtype=np.float64).reshape(-1)
    u = np.asarray(uncertainty, dtype=np.float64).reshape(-1)
    if c.size != u.size:
        raise DomainError(f"{c.size} correctness bits vs {u.size} scores")
    if c.size < 2:
        raise DomainError("lift curve needs at least two samples")
    if not np.all((c == 0.0) | (c == 1.0)):
        raise DomainError("correctness must be 0/1 bits")
    if not np.all(np.isfinite(u)):
        raise DomainError("uncertainty scores must be finite")
    if c.sum() == 0:
        raise DomainError("all predictions incorrect: lift is undefined")
    if c.sum() == c.size:
        warnings.warn("all predictions correct: rAULC is 1 by convention", stacklevel=2)
        k = np.arange(1, c.size + 1)
        return LiftCurve(k / c.size, np.ones(c.size), 0.0, 1.0)
    order = np.argsort(u, kind="mergesort")
    lifts, aulc = _aulc(c[order])
    oracle = np.sort(c)[::-1]
    _, aulc_oracle = _aulc(oracle)
    n = c.size
    return LiftCurve(np.arange(1, n + 1) / n, lifts, aulc, aulc / aulc_oracle)


def raulc(correct, uncertainty) -> float:
    return lift_curve(correct, uncertainty).raulc
