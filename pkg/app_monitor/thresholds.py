"""
Alert threshold selection on the calibration split

Candidates are the observed calibration scores: with distinct scores
u_1 > u_2 > ... > u_m, alerting on the top j score blocks is realised by the
midpoint (u_j + u_{j+1}) / 2, and alerting on everything by u_m. Alerts
fire on s >= threshold.
"""

import math
import logging
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from common.errors import RejectedInputError, UndefinedMetricError
from common.metrics import TrajectoryScores, tie_blocks

POLICIES = ("f1", "far_cap")
NEVER_ALERT = math.inf


def _pooled(series: Sequence[TrajectoryScores], labels: Mapping[str, Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    ys, ss = [], []
    for s in series:
        lab = labels[s.trajectory_id]
        if len(lab) != len(s.scores):
            raise RejectedInputError(f"Trajectory {s.trajectory_id}: {len(s.scores)} scores vs {len(lab)} labels")
        ys.extend(lab)
        ss.extend(s.scores)
    return np.asarray(ys, dtype=np.int64), np.asarray(ss, dtype=np.float64)


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """One threshold per distinct alert set, ordered from fewest to most alerts"""
    distinct = np.unique(scores)[::-1]
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    return np.r_[mids, distinct[-1]]


def select_threshold(
    series: Sequence[TrajectoryScores],
    labels: Mapping[str, Sequence[int]],
    policy: str = "f1",
    cap: Optional[float] = None,
) -> float:
    """
    policy="f1": threshold maximising prefix-level F1 (ties keep fewer alerts)
    policy="far_cap": smallest threshold whose successful-trajectory FAR is <= cap;
    returns +inf (never alert) with a warning when no threshold meets the cap
    """
    if policy not in POLICIES:
        raise RejectedInputError(f"Unknown threshold policy {policy!r}; choose one of {POLICIES}")
    y, s = _pooled(series, labels)
    if y.size == 0:
        raise RejectedInputError("Threshold selection needs at least one calibration prefix")
    positives = int(y.sum())
    if positives == 0 or positives == y.size:
        raise UndefinedMetricError("Calibration prefixes must contain both classes")

    candidates = candidate_thresholds(s)
    if policy == "f1":
        tp, pp, _ = tie_blocks(y, s)
        f1 = 2.0 * tp / (pp + positives)
        best = int(np.argmax(f1))
        threshold = float(candidates[best])
        logging.info("[Thresholds] Selected F1 threshold | threshold=%.6f | f1=%.4f", threshold, f1[best])
        return threshold

    if cap is None or not 0.0 <= cap <= 1.0:
        raise RejectedInputError(f"far_cap policy needs a cap in [0, 1], got {cap}")
    success_max = np.sort([max(t.scores) for t in series if t.outcome == 1])
    if success_max.size == 0:
        raise RejectedInputError("far_cap policy needs successful calibration trajectories")
    alerted = success_max.size - np.searchsorted(success_max, candidates, side="left")
    far = alerted / success_max.size
    ok = np.flatnonzero(far <= cap)
    if ok.size == 0:
        logging.warning("[Thresholds] FAR cap unattainable, monitor never alerts | cap=%.4f", cap)
        return NEVER_ALERT
    threshold = float(candidates[ok[-1]])
    logging.info("[Thresholds] Selected FAR-capped threshold | cap=%.4f | threshold=%.6f | far=%.4f",
                 cap, threshold, far[ok[-1]])
    return threshold


def select_thresholds(
    series: Sequence[TrajectoryScores],
    labels: Mapping[str, Sequence[int]],
    far_caps: Sequence[float] = (),
) -> Dict[str, float]:
    """The F1 threshold plus one threshold per FAR cap, keyed "f1" / "far_cap=<c>\""""
    out = {"f1": select_threshold(series, labels, "f1")}
    for cap in far_caps:
        out[f"far_cap={cap:g}"] = select_threshold(series, labels, "far_cap", cap)
    return out
