"""
Deterministic 12-step raw sample pack for offline adapter induction
"""

import hashlib
import logging
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Mapping, Tuple

from common.errors import RejectedInputError
from common.file_parser import dumps_canonical
from common.trace_model import RawTrajectory

from .adapter import ERROR_LEXICON, OK_STATUSES, coerce_step, stringify

PACK_SIZE = 12
MAX_SCANNED_TRAJECTORIES = 64
QUOTAS = (("initial", 4), ("mid", 4), ("tool", 2), ("anomalous", 2))

_STATUS_KEYS = ("status", "state", "step_status")
_RESULT_KEYS = ("result", "output", "response", "observation_result")
_TOOL_KEYS = ("tool", "tool_name", "function", "action_type")


@dataclass(frozen=True)
class SamplePackEntry:
    trajectory_id: str
    step_index: int
    bucket: str
    step: Any

    def to_dict(self) -> Dict[str, Any]:
        return {
            "trajectory_id": self.trajectory_id,
            "step_index": self.step_index,
            "bucket": self.bucket,
            "step": self.step,
        }


@dataclass(frozen=True)
class SamplePack:
    entries: Tuple[SamplePackEntry, ...]
    source_trajectory_ids: Tuple[str, ...]

    def bucket_counts(self) -> Dict[str, int]:
        counts = {name: 0 for name, _ in QUOTAS}
        for e in self.entries:
            counts[e.bucket] += 1
        return counts

    def to_dict(self) -> Dict[str, Any]:
        return {
            "entries": [e.to_dict() for e in self.entries],
            "source_trajectory_ids": list(self.source_trajectory_ids),
            "bucket_counts": self.bucket_counts(),
        }


def _first(step: Mapping[str, Any], keys: Tuple[str, ...]) -> str:
    for key in keys:
        if key in step:
            return stringify(step[key])
    return ""


def is_anomalous(step: Mapping[str, Any]) -> bool:
    status = _first(step, _STATUS_KEYS).strip().lower()
    result = _first(step, _RESULT_KEYS)
    return status not in OK_STATUSES or bool(ERROR_LEXICON.search(result))


def _order_key(trajectory_id: str, step_index: int) -> str:
    return hashlib.sha256(f"{trajectory_id}:{step_index}".encode("utf-8")).hexdigest()


def build_sample_pack(trajectories: Iterable[RawTrajectory]) -> SamplePack:
    """
    Bucket the steps of the first 64 trajectories (by id) and fill 4/4/2/2

    A step is `initial` when it is step 1, `anomalous` when its status is not
    ok/success/empty or its result matches the error lexicon, `tool` when it
    names a tool, `mid` otherwise (any non-initial step is also a mid
    candidate). Within a bucket steps are ordered by sha256 of
    "trajectory_id:step_index". Shortfalls are backfilled from mid, then
    from any unused step.
    """
    scanned = sorted(trajectories, key=lambda t: t.trajectory_id)[:MAX_SCANNED_TRAJECTORIES]
    if not scanned:
        raise RejectedInputError("Sample pack needs at least one trajectory")

    candidates: Dict[str, List[Tuple[str, str, int, Any]]] = {name: [] for name, _ in QUOTAS}
    everything: List[Tuple[str, str, int, Any]] = []
    for trajectory in scanned:
        for i, raw in enumerate(trajectory.steps, start=1):
            step = coerce_step(raw, i)
            item = (_order_key(trajectory.trajectory_id, i), trajectory.trajectory_id, i, raw)
            everything.append(item)
            if i == 1:
                candidates["initial"].append(item)
            else:
                candidates["mid"].append(item)
                if is_anomalous(step):
                    candidates["anomalous"].append(item)
                if _first(step, _TOOL_KEYS).strip():
                    candidates["tool"].append(item)

    if len(everything) < PACK_SIZE:
        raise RejectedInputError(
            f"Sample pack needs {PACK_SIZE} eligible steps, the first {len(scanned)} trajectories hold {len(everything)}"
        )
    for items in candidates.values():
        items.sort()
    everything.sort()

    used = set()
    picked: List[SamplePackEntry] = []

    def take(pool: List[Tuple[str, str, int, Any]], bucket: str, count: int) -> int:
        taken = 0
        for _, tid, idx, raw in pool:
            if taken == count:
                break
            if (tid, idx) in used:
                continue
            used.add((tid, idx))
            picked.append(SamplePackEntry(tid, idx, bucket, raw))
            taken += 1
        return taken

    # anomalous and tool steps are mid candidates too; they claim first
    order = ("anomalous", "tool", "initial", "mid")
    quotas = dict(QUOTAS)
    for bucket in order:
        missing = quotas[bucket] - take(candidates[bucket], bucket, quotas[bucket])
        if missing:
            logging.info("[SamplePack] Backfilling bucket | bucket=%s | missing=%s", bucket, missing)
            missing -= take(candidates["mid"], bucket, missing)
        if missing:
            take(everything, bucket, missing)

    bucket_rank = {name: k for k, (name, _) in enumerate(QUOTAS)}
    picked.sort(key=lambda e: (bucket_rank[e.bucket], _order_key(e.trajectory_id, e.step_index)))
    pack = SamplePack(tuple(picked), tuple(t.trajectory_id for t in scanned))
    logging.info("[SamplePack] Built pack | steps=%s | buckets=%s", len(pack.entries), dumps_canonical(pack.bucket_counts()))
    return pack
