"""
Prefix audit sets for the independent MPE probe

Only three observed fields enter a prefix text: status, action_text and
result_text. Each step contributes at most 1200 characters and a prefix
keeps its most recent 5000.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

from common.errors import RejectedInputError
from common.trace_model import warning_labels
from app_stepview.adapter import StepViewRecord, StepViewTrajectory

PROTOCOLS = ("all_prefix", "matched_nonterminal")
STEP_CHARS = 1200
PREFIX_CHARS = 5000


@dataclass(frozen=True)
class MpeAuditSet:
    protocol: str
    horizon: int
    positive_texts: Tuple[str, ...]
    negative_texts: Tuple[str, ...]
    positive_ids: Tuple[Tuple[str, int], ...]
    negative_ids: Tuple[Tuple[str, int], ...]

    @property
    def positive_rate(self) -> float:
        return len(self.positive_texts) / (len(self.positive_texts) + len(self.negative_texts))

    def summary(self):
        return {
            "protocol": self.protocol,
            "horizon": self.horizon,
            "positives": len(self.positive_texts),
            "negatives": len(self.negative_texts),
            "positive_rate": self.positive_rate,
        }


def step_audit_text(record: StepViewRecord) -> str:
    return f"{record.status} {record.action_text} {record.result_text}"[:STEP_CHARS]


def prefix_audit_texts(trajectory: StepViewTrajectory) -> List[str]:
    """Audit text of every prefix 1..T, built incrementally"""
    texts, steps = [], []
    for record in trajectory.records:
        steps.append(step_audit_text(record))
        texts.append("\n".join(steps)[-PREFIX_CHARS:])
    return texts


def build_mpe_audit_set(trajectories: Sequence[StepViewTrajectory], protocol: str, horizon: int = 3) -> MpeAuditSet:
    """
    all_prefix: every prefix, labelled by the warning rule.
    matched_nonterminal: only T - H <= t < T; failed prefixes positive, successful ones negative.
    """
    if protocol not in PROTOCOLS:
        raise RejectedInputError(f"Unknown audit protocol {protocol!r}; choose one of {PROTOCOLS}")
    pos_texts, neg_texts, pos_ids, neg_ids = [], [], [], []
    for traj in trajectories:
        T = traj.length
        texts = prefix_audit_texts(traj)
        labels = warning_labels(T, traj.outcome, horizon)
        for t in range(1, T + 1):
            if protocol == "matched_nonterminal":
                if not T - horizon <= t < T:
                    continue
                positive = traj.outcome == 0
            else:
                positive = labels[t - 1] == 1
            if positive:
                pos_texts.append(texts[t - 1])
                pos_ids.append((traj.trajectory_id, t))
            else:
                neg_texts.append(texts[t - 1])
                neg_ids.append((traj.trajectory_id, t))

    if not pos_texts or not neg_texts:
        raise RejectedInputError(
            f"Audit protocol {protocol} left an empty class | positives={len(pos_texts)} | negatives={len(neg_texts)}"
        )
    audit = MpeAuditSet(protocol, horizon, tuple(pos_texts), tuple(neg_texts), tuple(pos_ids), tuple(neg_ids))
    logging.info("[Audit] Built MPE audit set | protocol=%s | positives=%s | negatives=%s",
                 protocol, len(pos_texts), len(neg_texts))
    return audit
