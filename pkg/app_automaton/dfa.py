"""
Calibrated DFA: transition table, per-state risk, trust filter, scoring and audit

State ids are 0..n-1 for the live states (canonical RPNI order, 0 is the
initial state) plus one explicit sink at index n. Missing transitions and
out-of-alphabet symbols land in the sink, which is never trusted.
"""

import math
import logging
from collections import deque
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from common.errors import RejectedInputError, UndefinedMetricError
from common.file_parser import read_json, write_json
from common.metrics import TrajectoryScores
from common.trace_model import warning_labels
from app_monitor.thresholds import NEVER_ALERT, select_threshold

MIN_COUNT = 10
FALLBACK_POLICIES = ("prevalence", "zero")
TOP_STATES = 5


@dataclass
class Dfa:
    alphabet_size: int
    transitions: np.ndarray                 # (states + 1, K), last row is the sink
    accepting: Tuple[bool, ...]
    risks: np.ndarray = None
    counts: np.ndarray = None
    positives: np.ndarray = None
    trusted: np.ndarray = None
    min_count: int = MIN_COUNT
    fallback_risk: float = 0.0
    fallback_policy: str = "prevalence"
    calibrated: bool = False
    source_model_hash: str = ""
    info: Dict[str, Any] = field(default_factory=dict)

    initial: int = 0

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.int64)
        n = self.transitions.shape[0]
        if self.transitions.ndim != 2 or self.transitions.shape[1] != self.alphabet_size or n < 2:
            raise RejectedInputError(f"Transition table must be (states + 1, {self.alphabet_size}), got {self.transitions.shape}")
        if self.transitions.min() < 0 or self.transitions.max() >= n:
            raise RejectedInputError("Transition table points outside the state set")
        if np.any(self.transitions[self.sink] != self.sink):
            raise RejectedInputError("The sink must loop on every symbol")
        if len(self.accepting) != n:
            raise RejectedInputError(f"accepting has {len(self.accepting)} entries for {n} states")
        if self.fallback_policy not in FALLBACK_POLICIES:
            raise RejectedInputError(f"fallback_policy must be one of {FALLBACK_POLICIES}")
        if self.risks is None:
            self.risks = np.zeros(n)
            self.counts = np.zeros(n, dtype=np.int64)
            self.positives = np.zeros(n, dtype=np.int64)
            self.trusted = np.zeros(n, dtype=bool)
        if np.any((self.risks < 0.0) | (self.risks > 1.0)):
            raise RejectedInputError("State risks must lie in [0, 1]")

    @property
    def sink(self) -> int:
        return self.transitions.shape[0] - 1

    @property
    def states(self) -> int:
        """Live states, sink excluded"""
        return self.transitions.shape[0] - 1

    def step(self, state: int, symbol: int) -> int:
        if not 0 <= symbol < self.alphabet_size:
            return self.sink
        return int(self.transitions[state, symbol])

    def run(self, symbols: Sequence[int]) -> List[int]:
        """End state after each of z_1..z_t"""
        path = []
        q = self.initial
        for z in symbols:
            q = self.step(q, int(z))
            path.append(q)
        return path

    def accepts(self, symbols: Sequence[int]) -> bool:
        q = self.initial
        for z in symbols:
            q = self.step(q, int(z))
        return bool(self.accepting[q])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "alphabet_size": self.alphabet_size,
            "states": self.states,
            "initial": self.initial,
            "sink": self.sink,
            "transitions": self.transitions.tolist(),
            "accepting": list(self.accepting),
            "risks": [float(x) for x in self.risks],
            "counts": [int(x) for x in self.counts],
            "positives": [int(x) for x in self.positives],
            "trusted": [bool(x) for x in self.trusted],
            "min_count": self.min_count,
            "fallback_risk": self.fallback_risk,
            "fallback_policy": self.fallback_policy,
            "calibrated": self.calibrated,
            "source_model_hash": self.source_model_hash,
            "info": self.info,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "Dfa":
        try:
            return cls(
                alphabet_size=int(payload["alphabet_size"]),
                transitions=np.asarray(payload["transitions"], dtype=np.int64),
                accepting=tuple(bool(x) for x in payload["accepting"]),
                risks=np.asarray(payload["risks"], dtype=np.float64),
                counts=np.asarray(payload["counts"], dtype=np.int64),
                positives=np.asarray(payload["positives"], dtype=np.int64),
                trusted=np.asarray(payload["trusted"], dtype=bool),
                min_count=int(payload["min_count"]),
                fallback_risk=float(payload["fallback_risk"]),
                fallback_policy=payload.get("fallback_policy", "prevalence"),
                calibrated=bool(payload["calibrated"]),
                source_model_hash=payload.get("source_model_hash", ""),
                info=dict(payload.get("info", {})),
            )
        except (KeyError, TypeError) as e:
            raise RejectedInputError(f"Malformed DFA artifact: {e}") from e


def save_dfa(path: str, dfa: Dfa) -> None:
    write_json(path, dfa.to_dict())


def load_dfa(path: str) -> Dfa:
    return Dfa.from_dict(read_json(path))


def equivalent(a: Dfa, b: Dfa) -> bool:
    """Language equivalence by walking the reachable part of the product automaton"""
    if a.alphabet_size != b.alphabet_size:
        return False
    seen = {(a.initial, b.initial)}
    queue = deque(seen)
    while queue:
        p, q = queue.popleft()
        if a.accepting[p] != b.accepting[q]:
            return False
        for z in range(a.alphabet_size):
            nxt = (a.step(p, z), b.step(q, z))
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return True


# ----------------------------------------------------------------------------
# Calibration and scoring
# ----------------------------------------------------------------------------

def _routed_prefixes(dfa: Dfa, sequences: Sequence[Sequence[int]], outcomes: Sequence[int], horizon: int):
    ends, labels = [], []
    for symbols, outcome in zip(sequences, outcomes):
        ends.extend(dfa.run(symbols))
        labels.extend(warning_labels(len(symbols), outcome, horizon))
    return np.asarray(ends, dtype=np.int64), np.asarray(labels, dtype=np.int64)


def calibrate_state_risks(
    dfa: Dfa,
    sequences: Sequence[Sequence[int]],
    outcomes: Sequence[int],
    horizon: int,
    min_count: int = MIN_COUNT,
    fallback_policy: str = "prevalence",
) -> Dfa:
    """
    Route every calibration prefix to its end state; risk = positive fraction there

    States with fewer than min_count routed prefixes are untrusted. States
    that receive nothing carry the fallback risk (global calibration
    prevalence, or 0 under the "zero" policy). The sink is always untrusted.
    """
    if len(sequences) != len(outcomes):
        raise RejectedInputError(f"{len(sequences)} sequences vs {len(outcomes)} outcomes")
    if min_count < 1:
        raise RejectedInputError(f"min_count must be >= 1, got {min_count}")
    if fallback_policy not in FALLBACK_POLICIES:
        raise RejectedInputError(f"fallback_policy must be one of {FALLBACK_POLICIES}")
    ends, labels = _routed_prefixes(dfa, sequences, outcomes, horizon)
    if ends.size == 0:
        raise RejectedInputError("Calibration needs at least one prefix")

    n = dfa.transitions.shape[0]
    counts = np.bincount(ends, minlength=n)
    positives = np.bincount(ends, weights=labels, minlength=n).astype(np.int64)
    prevalence = float(labels.mean())
    fallback = prevalence if fallback_policy == "prevalence" else 0.0
    risks = np.where(counts > 0, positives / np.maximum(counts, 1), fallback)
    trusted = counts >= min_count
    trusted[dfa.sink] = False

    calibrated = Dfa(
        alphabet_size=dfa.alphabet_size, transitions=dfa.transitions, accepting=dfa.accepting,
        risks=risks, counts=counts, positives=positives, trusted=trusted,
        min_count=min_count, fallback_risk=fallback, fallback_policy=fallback_policy,
        calibrated=True, source_model_hash=dfa.source_model_hash,
        info={**dfa.info, "calibration_prefixes": int(ends.size), "calibration_prevalence": prevalence},
    )
    logging.info("[DFA] Calibrated state risks | prefixes=%s | states=%s | trusted_states=%s | prevalence=%.4f",
                 ends.size, dfa.states, int(trusted.sum()), prevalence)
    return calibrated


@dataclass(frozen=True)
class DfaScores:
    trajectory_id: str
    risks: Tuple[float, ...]
    abstain: Tuple[bool, ...]
    states: Tuple[int, ...]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def dfa_score_prefix(dfa: Dfa, symbols: Sequence[int], trajectory_id: str = "") -> DfaScores:
    """Per-step state risk; untrusted states abstain and emit the fallback risk"""
    if not dfa.calibrated:
        raise RejectedInputError("DFA must be calibrated before scoring")
    states = dfa.run(symbols)
    risks, abstain = [], []
    for q in states:
        if dfa.trusted[q]:
            risks.append(float(dfa.risks[q]))
            abstain.append(False)
        else:
            risks.append(float(dfa.fallback_risk))
            abstain.append(True)
    return DfaScores(trajectory_id, tuple(risks), tuple(abstain), tuple(states))


# ----------------------------------------------------------------------------
# Audit
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class DfaAuditReport:
    states: int
    prefixes: int
    trusted_share: float
    abstention: float
    warning_states: int
    warning_threshold: float
    top5_share: float
    max_trusted_risk: Optional[float]

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        if math.isinf(self.warning_threshold):
            out["warning_threshold"] = "inf"
        return out


def warning_threshold(
    dfa: Dfa,
    sequences: Sequence[Sequence[int]],
    outcomes: Sequence[int],
    horizon: int,
    ids: Optional[Sequence[str]] = None,
) -> float:
    """F1 threshold over the calibration DFA risk series; never alerts when F1 is undefined"""
    ids = list(ids) if ids is not None else [str(i) for i in range(len(sequences))]
    series, labels = [], {}
    for tid, symbols, outcome in zip(ids, sequences, outcomes):
        scored = dfa_score_prefix(dfa, symbols, tid)
        series.append(TrajectoryScores(tid, outcome, scored.risks))
        labels[tid] = warning_labels(len(symbols), outcome, horizon)
    try:
        return select_threshold(series, labels, "f1")
    except UndefinedMetricError as e:
        logging.warning("[DFA] Warning threshold undefined, no warning states | reason=%s", e)
        return NEVER_ALERT


def audit_dfa(dfa: Dfa, sequences: Sequence[Sequence[int]], threshold: float) -> DfaAuditReport:
    """Coverage and concentration statistics of test prefixes over the DFA states"""
    if not dfa.calibrated:
        raise RejectedInputError("DFA must be calibrated before auditing")
    ends = np.asarray([q for symbols in sequences for q in dfa.run(symbols)], dtype=np.int64)
    if ends.size == 0:
        raise RejectedInputError("Audit needs at least one test prefix")

    routed = np.bincount(ends, minlength=dfa.transitions.shape[0])
    trusted_share = float(routed[dfa.trusted].sum() / ends.size)
    top = np.sort(routed)[::-1][:TOP_STATES]
    live_trusted = np.flatnonzero(dfa.trusted[:dfa.sink])
    warning = int(np.sum(dfa.risks[live_trusted] >= threshold))
    report = DfaAuditReport(
        states=dfa.states,
        prefixes=int(ends.size),
        trusted_share=trusted_share,
        abstention=1.0 - trusted_share,
        warning_states=warning,
        warning_threshold=float(threshold),
        top5_share=float(top.sum() / ends.size),
        max_trusted_risk=float(dfa.risks[live_trusted].max()) if live_trusted.size else None,
    )
    logging.info("[DFA] Audit | states=%s | trusted_share=%.4f | warning_states=%s | top5_share=%.4f",
                 report.states, report.trusted_share, report.warning_states, report.top5_share)
    return report
