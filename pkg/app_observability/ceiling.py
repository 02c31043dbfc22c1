"""
AUPRC observability ceiling

When only a fraction pi of positive prefixes is distinguishable from
negatives (the rest share the negative score distribution), the best
achievable population AUPRC at positive rate r is

    A(pi, r) = pi + r(1-pi)^2 / (1-pi r)
                  + r pi (1-pi)(1-r) / (1-pi r)^2 * ln(1 / (pi r))

with A(0, r) = r and A(1, r) = 1. It is the integral over recall of the
precision envelope `prec_max` and is attained by `sample_tight_instance`.
"""

import math
import logging
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.optimize import bisect

from common.errors import RejectedInputError
from common.metrics import ScoredPrefix, ScoredPrefixSet

PI_TOL = 1e-6
AUPRC_TOL = 1e-6


def _check_rate(r: float) -> None:
    if not 0.0 < r < 1.0:
        raise RejectedInputError(f"Positive-prefix rate r must lie in (0, 1), got {r}")


def _check_pi(pi: float) -> None:
    if not 0.0 <= pi <= 1.0:
        raise RejectedInputError(f"Observable fraction pi must lie in [0, 1], got {pi}")


def ceiling(pi: float, r: float) -> float:
    _check_rate(r)
    _check_pi(pi)
    if pi == 0.0:
        return r
    if pi == 1.0:
        return 1.0
    d = 1.0 - pi * r
    return (
        pi
        + r * (1.0 - pi) ** 2 / d
        + r * pi * (1.0 - pi) * (1.0 - r) / d ** 2 * math.log(1.0 / (pi * r))
    )


def naive_bound(pi: float, r: float) -> float:
    """Linear interpolation r + pi(1 - r), strictly below the ceiling on (0, 1)"""
    return r + pi * (1.0 - r)


def prec_max(recall: float, pi: float, r: float) -> float:
    """Highest precision reachable at a given recall: observable positives first, then hidden ones at the negative rate"""
    _check_rate(r)
    if recall <= pi:
        return 1.0
    tp = r * recall * (1.0 - pi)
    return tp / (tp + (1.0 - r) * (recall - pi))


def required_pi(auprc: float, r: float) -> float:
    """Smallest pi whose ceiling reaches the achieved AUPRC (inverse of the strictly increasing A(., r))"""
    _check_rate(r)
    if auprc < r - AUPRC_TOL or auprc > 1.0 + AUPRC_TOL:
        raise RejectedInputError(f"Achieved AUPRC {auprc} must lie in [r, 1] = [{r}, 1]")
    if auprc <= r:
        return 0.0
    if auprc >= 1.0:
        return 1.0
    pi = bisect(lambda p: ceiling(p, r) - auprc, 0.0, 1.0, xtol=PI_TOL * 1e-3)
    logging.debug("[Ceiling] Inverted ceiling | auprc=%.6f | r=%.6f | pi=%.6f", auprc, r, pi)
    return float(pi)


def sample_tight_scores(pi: float, r: float, n: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    (labels, scores) of the disjoint-support instance: observable positives
    score in U(1, 2), hidden positives and negatives in U(0, 1)
    """
    _check_rate(r)
    _check_pi(pi)
    if n < 1:
        raise RejectedInputError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    labels = (rng.random(n) < r).astype(np.int64)
    observable = (labels == 1) & (rng.random(n) < pi)
    scores = rng.random(n) + observable.astype(np.float64)
    return labels, scores


def sample_tight_instance(pi: float, r: float, n: int, seed: int) -> ScoredPrefixSet:
    labels, scores = sample_tight_scores(pi, r, n, seed)
    return ScoredPrefixSet(
        ScoredPrefix(trajectory_id=f"tight-{i}", t=1, length=1, outcome=1 - int(y), label=int(y), score=float(s))
        for i, (y, s) in enumerate(zip(labels, scores))
    )


def ceiling_grid(pis: Sequence[float], rates: Sequence[float]) -> List[Dict[str, float]]:
    """Rows of (pi, r, ceiling, naive bound) for plotting ceiling curves"""
    return [
        {"pi": float(p), "r": float(r), "ceiling": ceiling(p, r), "naive": naive_bound(p, r)}
        for r in rates
        for p in pis
    ]
