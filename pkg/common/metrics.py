"""
Ranking, calibration, operating-point and first-alert metrics over scored prefixes
"""

import math
import logging
from dataclasses import dataclass, asdict
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .errors import RejectedInputError, UndefinedMetricError

ECE_BINS = 15


@dataclass(frozen=True)
class ScoredPrefix:
    trajectory_id: str
    t: int
    length: int
    outcome: int
    label: int
    score: float
    abstain: bool = False


class ScoredPrefixSet:
    """
    The evaluated prefixes of one split, one record per (trajectory, t)

    Ranking metrics use `trusted()` records only; abstained prefixes are
    counted separately.
    """

    def __init__(self, records: Iterable[ScoredPrefix]):
        self.records: Tuple[ScoredPrefix, ...] = tuple(records)
        seen = set()
        for r in self.records:
            key = (r.trajectory_id, r.t)
            if key in seen:
                raise RejectedInputError(f"Duplicate scored prefix {key}")
            seen.add(key)
            if r.label not in (0, 1):
                raise RejectedInputError(f"Label must be 0 or 1 at {key}, got {r.label}")
            if not (0.0 <= r.score <= 1.0) or math.isnan(r.score):
                raise RejectedInputError(f"Score must lie in [0, 1] at {key}, got {r.score}")

    def __len__(self):
        return len(self.records)

    @classmethod
    def from_series(
        cls,
        series: Sequence["TrajectoryScores"],
        labels: Dict[str, Sequence[int]],
        abstain: Optional[Dict[str, Sequence[bool]]] = None,
    ) -> "ScoredPrefixSet":
        records = []
        for s in series:
            flags = abstain.get(s.trajectory_id) if abstain else None
            for i, score in enumerate(s.scores):
                records.append(ScoredPrefix(
                    trajectory_id=s.trajectory_id, t=i + 1, length=len(s.scores), outcome=s.outcome,
                    label=int(labels[s.trajectory_id][i]), score=float(score),
                    abstain=bool(flags[i]) if flags is not None else False,
                ))
        return cls(records)

    def trusted(self) -> "ScoredPrefixSet":
        return ScoredPrefixSet(r for r in self.records if not r.abstain)

    @property
    def abstained(self) -> int:
        return sum(1 for r in self.records if r.abstain)

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """(labels, scores) as numpy arrays"""
        labels = np.fromiter((r.label for r in self.records), dtype=np.int64, count=len(self.records))
        scores = np.fromiter((r.score for r in self.records), dtype=np.float64, count=len(self.records))
        return labels, scores


@dataclass(frozen=True)
class TrajectoryScores:
    """Per-step risk series s_1..s_T of one trajectory"""
    trajectory_id: str
    outcome: int
    scores: Tuple[float, ...]


def _checked(labels, scores, need_both: bool) -> Tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise RejectedInputError(f"labels {labels.shape} and scores {scores.shape} must be equal-length vectors")
    if labels.size == 0:
        raise RejectedInputError("Metric needs at least one scored prefix")
    if need_both:
        positives = int(labels.sum())
        if positives == 0 or positives == labels.size:
            raise UndefinedMetricError("Metric is undefined when only one class is present")
    return labels, scores


# ----------------------------------------------------------------------------
# Ranking
# ----------------------------------------------------------------------------

def tie_blocks(labels: np.ndarray, scores: np.ndarray):
    """Cumulative (tp, predicted_positive, threshold) at the end of each equal-score block"""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    pp = last + 1
    return tp, pp, s[last]


def average_precision(labels, scores) -> float:
    """
    Step-interpolated AP: sum_k (R_k - R_{k-1}) P_k over descending scores

    Items sharing a score enter together as one block.
    """
    labels, scores = _checked(labels, scores, need_both=True)
    tp, pp, _ = tie_blocks(labels, scores)
    precision = tp / pp
    recall = tp / tp[-1]
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def auroc(labels, scores) -> float:
    """Mann-Whitney pairwise statistic with ties counted as 1/2"""
    labels, scores = _checked(labels, scores, need_both=True)
    ranks = rankdata(scores)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def precision_recall_points(labels, scores) -> List[Dict[str, float]]:
    labels, scores = _checked(labels, scores, need_both=True)
    tp, pp, thresholds = tie_blocks(labels, scores)
    return [
        {"threshold": float(th), "precision": float(t / p), "recall": float(t / tp[-1])}
        for t, p, th in zip(tp, pp, thresholds)
    ]


def roc_points(labels, scores) -> List[Dict[str, float]]:
    labels, scores = _checked(labels, scores, need_both=True)
    tp, pp, thresholds = tie_blocks(labels, scores)
    n_pos = tp[-1]
    n_neg = labels.size - n_pos
    points = [{"threshold": math.inf, "fpr": 0.0, "tpr": 0.0}]
    for t, p, th in zip(tp, pp, thresholds):
        points.append({"threshold": float(th), "fpr": float((p - t) / n_neg), "tpr": float(t / n_pos)})
    return points


# ----------------------------------------------------------------------------
# Calibration
# ----------------------------------------------------------------------------

def ece(labels, scores, bins: int = ECE_BINS) -> float:
    """Equal-width, right-closed bins (m/M, (m+1)/M]; 0 joins the first bin and 1.0 the last"""
    labels, scores = _checked(labels, scores, need_both=False)
    if bins < 1:
        raise RejectedInputError(f"bins must be >= 1, got {bins}")
    inner = np.linspace(0.0, 1.0, bins + 1)[1:-1]
    index = np.searchsorted(inner, scores, side="left")
    total = 0.0
    for m in range(bins):
        in_bin = index == m
        count = int(in_bin.sum())
        if count == 0:
            continue
        total += (count / labels.size) * abs(labels[in_bin].mean() - scores[in_bin].mean())
    return float(total)


def brier(labels, scores) -> float:
    labels, scores = _checked(labels, scores, need_both=False)
    return float(np.mean((scores - labels) ** 2))


# ----------------------------------------------------------------------------
# Operating points
# ----------------------------------------------------------------------------

def _ratio(num: float, den: float) -> Optional[float]:
    return None if den == 0 else float(num / den)


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    fpr: Optional[float]

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        if math.isinf(self.threshold):
            out["threshold"] = "inf"
        return out


def confusion_at(labels, scores, threshold: float) -> OperatingPoint:
    """Alerts are s >= threshold; ratios with a zero denominator are None"""
    labels, scores = _checked(labels, scores, need_both=False)
    if math.isnan(threshold):
        raise RejectedInputError("Threshold must not be NaN")
    alert = scores >= threshold
    positive = labels == 1
    tp = int(np.sum(alert & positive))
    fp = int(np.sum(alert & ~positive))
    fn = int(np.sum(~alert & positive))
    tn = int(np.sum(~alert & ~positive))
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    return OperatingPoint(
        threshold=float(threshold), tp=tp, fp=fp, tn=tn, fn=fn,
        accuracy=_ratio(tp + tn, labels.size), precision=precision, recall=recall,
        f1=f1, fpr=_ratio(fp, fp + tn),
    )


# ----------------------------------------------------------------------------
# Trajectory-level first alerts
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class FirstAlertReport:
    threshold: float
    horizon: int
    far: Optional[float]
    fail_alert_recall: Optional[float]
    early_fail_recall: Optional[float]
    alert_precision: Optional[float]
    lead_time: Optional[float]
    successes: int
    failures: int
    alerted: int

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        if math.isinf(self.threshold):
            out["threshold"] = "inf"
        return out


def first_alert(scores: Sequence[float], threshold: float) -> Optional[int]:
    """1-based index of the first step with s_t >= threshold, or None"""
    hits = np.flatnonzero(np.asarray(scores, dtype=np.float64) >= threshold)
    return int(hits[0]) + 1 if hits.size else None


def first_alert_diagnostics(series: Sequence[TrajectoryScores], threshold: float, horizon: int) -> FirstAlertReport:
    """
    FAR, fail-alert recall, early-fail recall (a < T - H), trajectory-level
    alert precision and unconditional lead time (misses count as 0)
    """
    if horizon < 1:
        raise RejectedInputError(f"horizon must be >= 1, got {horizon}")
    successes = failures = alerted_success = alerted_fail = early = 0
    lead_total = 0.0
    for traj in series:
        T = len(traj.scores)
        if T == 0:
            raise RejectedInputError(f"Trajectory {traj.trajectory_id} has no scores")
        a = first_alert(traj.scores, threshold)
        if traj.outcome == 1:
            successes += 1
            alerted_success += a is not None
            continue
        failures += 1
        if a is None:
            continue
        alerted_fail += 1
        early += a < T - horizon
        lead_total += (T - a) / T

    alerted = alerted_success + alerted_fail
    return FirstAlertReport(
        threshold=float(threshold), horizon=horizon,
        far=_ratio(alerted_success, successes),
        fail_alert_recall=_ratio(alerted_fail, failures),
        early_fail_recall=_ratio(early, failures),
        alert_precision=_ratio(alerted_fail, alerted),
        lead_time=_ratio(lead_total, failures),
        successes=successes, failures=failures, alerted=alerted,
    )


# ----------------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------------

def metrics_report(prefixes: ScoredPrefixSet, thresholds: Optional[Dict[str, float]] = None) -> Dict[str, Any]:
    """
    Pooled prefix metrics over trusted prefixes: N, prevalence, AP, ROC, ECE,
    Brier, plus the confusion summary at each named threshold
    """
    trusted = prefixes.trusted()
    labels, scores = trusted.arrays()
    report: Dict[str, Any] = {
        "n": int(labels.size),
        "abstained": prefixes.abstained,
        "positive_rate": float(labels.mean()) if labels.size else None,
    }
    if labels.size == 0:
        logging.warning("[Metrics] No trusted prefixes | abstained=%s", prefixes.abstained)
        report.update(auprc=None, auroc=None, ece=None, brier=None, operating_points={})
        return report
    try:
        report["auprc"] = average_precision(labels, scores)
        report["auroc"] = auroc(labels, scores)
    except UndefinedMetricError as e:
        logging.warning("[Metrics] Ranking metrics undefined | n=%s | reason=%s", labels.size, e)
        report["auprc"] = None
        report["auroc"] = None
    report["ece"] = ece(labels, scores)
    report["brier"] = brier(labels, scores)
    report["operating_points"] = {
        name: confusion_at(labels, scores, th).to_dict() for name, th in sorted((thresholds or {}).items())
    }
    return report


def aggregate_reports(reports: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    """Mean and sample standard deviation of every numeric leaf shared by all reports"""
    if not reports:
        raise RejectedInputError("aggregate_reports needs at least one report")

    def walk(nodes: List[Any]) -> Any:
        head = nodes[0]
        if isinstance(head, dict):
            keys = set(head)
            for n in nodes[1:]:
                keys &= set(n) if isinstance(n, dict) else set()
            return {k: walk([n[k] for n in nodes]) for k in sorted(keys)}
        numeric = [n for n in nodes if isinstance(n, (int, float)) and not isinstance(n, bool)]
        if len(numeric) != len(nodes):
            return None
        values = np.asarray(numeric, dtype=np.float64)
        std = float(values.std(ddof=1)) if values.size > 1 else 0.0
        return {"mean": float(values.mean()), "std": std, "n": int(values.size)}

    return walk(list(reports))
