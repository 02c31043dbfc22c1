"""
Mixture-proportion estimation of the observable positive fraction

Positive-prefix probe scores are modelled as F+ = pi F_obs + (1 - pi) F-,
so on any lower-score tail F+(t) >= (1 - pi) F-(t). The trimmed CDF ratio

    kappa = min over t with F-(t) >= trim of F+(t) / F-(t)

estimates 1 - pi. Scores must come from a probe that never saw the
monitor, fitted on training prefixes and applied to held-out ones.
"""

import re
import logging
from dataclasses import dataclass, asdict
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from common.errors import RejectedInputError
from app_stepview.adapter import ERROR_LEXICON

TAIL_TRIM = 0.2
REPLICATES = 200
CI_PERCENTILES = (2.5, 97.5)


@dataclass(frozen=True)
class MpeResult:
    pi_hat: float
    kappa: float
    n_positive: int
    n_negative: int
    trim: float
    ci_lower: Optional[float] = None
    ci_upper: Optional[float] = None
    replicates: int = 0
    seed: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _arrays(positive, negative) -> Tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(positive, dtype=np.float64).ravel()
    neg = np.asarray(negative, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise RejectedInputError(f"MPE needs positive and negative scores, got {pos.size} and {neg.size}")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise RejectedInputError("MPE scores must be finite")
    return pos, neg


def trimmed_kappa(pos: np.ndarray, neg: np.ndarray, trim: float = TAIL_TRIM) -> float:
    """Minimum CDF ratio over the pooled support points where the negative CDF reaches `trim`"""
    support = np.unique(np.concatenate([pos, neg]))
    f_pos = np.searchsorted(np.sort(pos), support, side="right") / pos.size
    f_neg = np.searchsorted(np.sort(neg), support, side="right") / neg.size
    eligible = f_neg >= trim
    return float(np.min(f_pos[eligible] / f_neg[eligible]))


def mpe_estimate(positive, negative, trim: float = TAIL_TRIM) -> MpeResult:
    if not 0.0 < trim <= 1.0:
        raise RejectedInputError(f"trim must lie in (0, 1], got {trim}")
    pos, neg = _arrays(positive, negative)
    kappa = trimmed_kappa(pos, neg, trim)
    return MpeResult(
        pi_hat=1.0 - float(np.clip(kappa, 0.0, 1.0)),
        kappa=kappa,
        n_positive=int(pos.size),
        n_negative=int(neg.size),
        trim=trim,
    )


def mpe_bootstrap(
    positive,
    negative,
    replicates: int = REPLICATES,
    seed: int = 0,
    trim: float = TAIL_TRIM,
) -> MpeResult:
    """Point estimate plus a percentile CI; positives and negatives resampled independently"""
    if replicates < 1:
        raise RejectedInputError(f"replicates must be >= 1, got {replicates}")
    point = mpe_estimate(positive, negative, trim)
    pos, neg = _arrays(positive, negative)

    estimates = np.empty(replicates)
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(replicates)):
        rng = np.random.default_rng(child)
        kappa = trimmed_kappa(rng.choice(pos, pos.size), rng.choice(neg, neg.size), trim)
        estimates[i] = 1.0 - np.clip(kappa, 0.0, 1.0)
    lower, upper = np.percentile(estimates, CI_PERCENTILES)

    logging.info("[MPE] Bootstrap | pi_hat=%.4f | ci=[%.4f, %.4f] | replicates=%s | seed=%s",
                 point.pi_hat, lower, upper, replicates, seed)
    return MpeResult(
        pi_hat=point.pi_hat, kappa=point.kappa, n_positive=point.n_positive, n_negative=point.n_negative,
        trim=trim, ci_lower=float(lower), ci_upper=float(upper), replicates=replicates, seed=seed,
    )


@dataclass(frozen=True)
class EvidenceAnchor:
    pi_e: float
    q_plus: float
    q_minus: float
    degenerate: bool

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def explicit_evidence_anchor(q_plus: float, q_minus: float) -> EvidenceAnchor:
    """max(0, (q+ - q-) / (1 - q-)); q- = 1 leaves nothing to explain and is reported as 0"""
    for name, q in (("q_plus", q_plus), ("q_minus", q_minus)):
        if not 0.0 <= q <= 1.0:
            raise RejectedInputError(f"{name} must lie in [0, 1], got {q}")
    if q_minus >= 1.0:
        return EvidenceAnchor(0.0, q_plus, q_minus, degenerate=True)
    return EvidenceAnchor(max(0.0, (q_plus - q_minus) / (1.0 - q_minus)), q_plus, q_minus, degenerate=False)


def explicit_evidence_rates(
    positive_texts: Sequence[str],
    negative_texts: Sequence[str],
    lexicon: re.Pattern = ERROR_LEXICON,
) -> Tuple[float, float]:
    """Share of positive / negative audit prefixes whose text carries explicit failure evidence"""
    if not positive_texts or not negative_texts:
        raise RejectedInputError("Evidence rates need positive and negative prefixes")

    def rate(texts: Sequence[str]) -> float:
        return sum(1 for t in texts if lexicon.search(t)) / len(texts)

    return rate(positive_texts), rate(negative_texts)
