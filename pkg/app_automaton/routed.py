"""
Routed DFA diagnostic: one DFA per deployment-visible route value, plus the route-prior baseline
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from common.errors import RejectedInputError
from common.trace_model import warning_labels
from app_stepview.adapter import SENTINEL, StepViewTrajectory

from .dfa import MIN_COUNT, Dfa, DfaScores, calibrate_state_risks, dfa_score_prefix
from .rpni import induce_dfa

TASK_ROUTE = "task_id"


@dataclass(frozen=True)
class RoutedSequence:
    trajectory_id: str
    route: str
    symbols: Tuple[int, ...]
    outcome: int


def route_value(trajectory: StepViewTrajectory, key: str) -> str:
    """Route read at step 1: the task id, or a `key=value` metadata line of the first record"""
    if key == TASK_ROUTE:
        return trajectory.task_id or SENTINEL
    if not trajectory.records:
        return SENTINEL
    prefix = f"{key}="
    for line in trajectory.records[0].metadata_lines:
        if line.startswith(prefix):
            return line[len(prefix):]
    return SENTINEL


def _prevalence(items: Sequence[RoutedSequence], horizon: int) -> Optional[float]:
    labels = [p for it in items for p in warning_labels(len(it.symbols), it.outcome, horizon)]
    return float(np.mean(labels)) if labels else None


@dataclass
class RoutedDfa:
    route_key: str
    dfas: Dict[str, Dfa]
    priors: Dict[str, float]
    global_prior: float
    info: Dict[str, Any] = field(default_factory=dict)

    @property
    def total_states(self) -> int:
        return sum(d.states for d in self.dfas.values())

    def prior(self, route: str) -> Tuple[float, bool]:
        """(route prior, abstain); unseen routes get the global prior and abstain"""
        if route in self.priors:
            return self.priors[route], False
        return self.global_prior, True

    def score(self, item: RoutedSequence) -> DfaScores:
        dfa = self.dfas.get(item.route)
        if dfa is None:
            n = len(item.symbols)
            return DfaScores(item.trajectory_id, (self.global_prior,) * n, (True,) * n, (-1,) * n)
        return dfa_score_prefix(dfa, item.symbols, item.trajectory_id)

    def score_route_prior(self, item: RoutedSequence) -> DfaScores:
        prior, abstain = self.prior(item.route)
        n = len(item.symbols)
        return DfaScores(item.trajectory_id, (prior,) * n, (abstain,) * n, (-1,) * n)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "route_key": self.route_key,
            "global_prior": self.global_prior,
            "priors": dict(sorted(self.priors.items())),
            "routes": {k: d.to_dict() for k, d in sorted(self.dfas.items())},
            "info": self.info,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "RoutedDfa":
        try:
            return cls(
                route_key=payload["route_key"],
                dfas={k: Dfa.from_dict(v) for k, v in payload["routes"].items()},
                priors={k: float(v) for k, v in payload["priors"].items()},
                global_prior=float(payload["global_prior"]),
                info=dict(payload.get("info", {})),
            )
        except (KeyError, TypeError) as e:
            raise RejectedInputError(f"Malformed routed DFA artifact: {e}") from e


def _by_route(items: Sequence[RoutedSequence]) -> Dict[str, List[RoutedSequence]]:
    groups: Dict[str, List[RoutedSequence]] = {}
    for it in items:
        groups.setdefault(it.route, []).append(it)
    return groups


def induce_routed_dfa(
    route_key: str,
    train: Sequence[RoutedSequence],
    calibration: Sequence[RoutedSequence],
    alphabet_size: int,
    horizon: int,
    min_count: int = MIN_COUNT,
    prefixes: bool = False,
) -> RoutedDfa:
    """
    Induce and calibrate one DFA inside each route seen in both train and calibration

    A route whose training sample is empty after the ambiguity filter gets
    no DFA and is treated as unseen at scoring time. Single-class routes keep
    their degenerate 0 or 1 prior.
    """
    global_prior = _prevalence(calibration, horizon)
    if global_prior is None:
        raise RejectedInputError("Routed calibration needs at least one prefix")
    train_groups = _by_route(train)
    cal_groups = _by_route(calibration)

    priors = {route: _prevalence(items, horizon) for route, items in cal_groups.items()}
    dfas: Dict[str, Dfa] = {}
    skipped: List[str] = []
    for route in sorted(set(train_groups) & set(cal_groups)):
        items = train_groups[route]
        try:
            dfa = induce_dfa([it.symbols for it in items], [it.outcome for it in items],
                             alphabet_size, horizon, prefixes)
        except RejectedInputError as e:
            logging.warning("[Routed] Route skipped | route=%s | reason=%s", route, e)
            skipped.append(route)
            continue
        cal = cal_groups[route]
        dfas[route] = calibrate_state_risks(
            dfa, [it.symbols for it in cal], [it.outcome for it in cal], horizon, min_count,
        )

    routed = RoutedDfa(route_key, dfas, priors, global_prior, info={"skipped_routes": skipped})
    logging.info("[Routed] Induced routed DFA | route_key=%s | routes=%s | states=%s",
                 route_key, len(dfas), routed.total_states)
    return routed
