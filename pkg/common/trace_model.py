"""
Trajectories, prefix labels, dataset splits and the synthetic trace corpus

Outcome encoding: 1 = success, 0 = failure. The warning label inverts it:
a prefix is positive only when its trajectory failed and at most H steps remain.
"""

import hashlib
import logging
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from sklearn.model_selection import train_test_split

from .config import require
from .errors import RejectedInputError

SPLIT_ROLES = ("train", "calibration", "validation", "test")


@dataclass(frozen=True)
class RawTrajectory:
    """One agent execution trace: ordered raw steps plus the verifier outcome"""

    trajectory_id: str
    task_id: str
    outcome: int
    steps: Tuple[Mapping[str, Any], ...]

    def __post_init__(self):
        if self.outcome not in (0, 1):
            raise RejectedInputError(
                f"Trajectory {self.trajectory_id}: outcome must be 0 or 1, got {self.outcome!r}"
            )
        object.__setattr__(self, "steps", tuple(self.steps))

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def failed(self) -> bool:
        return self.outcome == 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "trajectory_id": self.trajectory_id,
            "task_id": self.task_id,
            "outcome": self.outcome,
            "steps": [dict(s) for s in self.steps],
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "RawTrajectory":
        try:
            return cls(
                trajectory_id=str(payload["trajectory_id"]),
                task_id=str(payload.get("task_id", "")),
                outcome=int(payload["outcome"]),
                steps=tuple(payload["steps"]),
            )
        except (KeyError, TypeError) as e:
            raise RejectedInputError(f"Malformed trajectory record: {e}") from e


@dataclass(frozen=True)
class PrefixLabelSet:
    trajectory_id: str
    horizon: int
    labels: Tuple[int, ...]

    @property
    def positives(self) -> int:
        return sum(self.labels)


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint id sets; calibration ids are carved out of the training pool"""

    train_ids: frozenset
    calibration_ids: frozenset
    validation_ids: frozenset
    test_ids: frozenset
    seed: int

    def __post_init__(self):
        sets = [self.train_ids, self.calibration_ids, self.validation_ids, self.test_ids]
        for i in range(len(sets)):
            for j in range(i + 1, len(sets)):
                if sets[i] & sets[j]:
                    raise RejectedInputError(
                        f"Split roles {SPLIT_ROLES[i]} and {SPLIT_ROLES[j]} overlap"
                    )

    def ids(self, role: str) -> frozenset:
        if role not in SPLIT_ROLES:
            raise RejectedInputError(f"Unknown split role {role!r}; choose one of {SPLIT_ROLES}")
        return {
            "train": self.train_ids,
            "calibration": self.calibration_ids,
            "validation": self.validation_ids,
            "test": self.test_ids,
        }[role]

    def role_of(self, trajectory_id: str) -> Optional[str]:
        for role in SPLIT_ROLES:
            if trajectory_id in self.ids(role):
                return role
        return None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "train_ids": sorted(self.train_ids),
            "calibration_ids": sorted(self.calibration_ids),
            "validation_ids": sorted(self.validation_ids),
            "test_ids": sorted(self.test_ids),
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "SplitSpec":
        try:
            return cls(
                train_ids=frozenset(payload["train_ids"]),
                calibration_ids=frozenset(payload["calibration_ids"]),
                validation_ids=frozenset(payload["validation_ids"]),
                test_ids=frozenset(payload["test_ids"]),
                seed=int(payload["seed"]),
            )
        except (KeyError, TypeError) as e:
            raise RejectedInputError(f"Malformed split file: {e}") from e


@dataclass(frozen=True)
class SynthConfig:
    """
    Synthetic corpus settings

    Lengths are min_length - 1 plus a geometric draw with the requested mean,
    clipped at max_length. The geometric tail is memoryless, so from
    t = min_length on the chance that a prefix sits in the last H + 1 steps
    does not depend on t and position alone carries no warning signal.
    """
    trajectory_count: int = 2000
    min_length: int = 4
    mean_length: float = 12.0
    max_length: int = 64
    failure_rate: float = 0.3
    precursor_probability: float = 0.9
    precursor_tokens: Tuple[str, ...] = (
        "timeout_error", "permission_denied", "element_not_found", "traceback_raised",
    )
    injection_window: int = 4
    noise_tokens: Tuple[str, ...] = (
        "loaded", "rendered", "listing", "results", "page", "updated", "cached", "opened",
        "scrolled", "visible", "summary", "returned", "matched", "selected", "saved", "queued",
    )
    tools: Tuple[str, ...] = ("click", "type_text", "search", "navigate", "read_file", "run_command")
    domains: Tuple[str, ...] = ("shopping", "forum", "code", "maps")
    task_count: int = 24
    seed: int = 0

    def validate(self) -> None:
        require(self.trajectory_count >= 1, "trajectory_count must be >= 1")
        require(1 <= self.min_length <= self.max_length, "need 1 <= min_length <= max_length")
        require(self.min_length <= self.mean_length <= self.max_length, "mean_length must lie in [min_length, max_length]")
        require(0.0 < self.failure_rate < 1.0, "failure_rate must lie in (0, 1)")
        require(0.0 <= self.precursor_probability <= 1.0, "precursor_probability must lie in [0, 1]")
        require(1 <= self.injection_window <= self.min_length, "injection window must be in [1, min_length]")
        require(len(self.precursor_tokens) > 0, "precursor_tokens must be nonempty")
        require(len(self.noise_tokens) > 0, "noise_tokens must be nonempty")
        require(len(self.tools) > 0, "tools must be nonempty")
        require(len(self.domains) > 0 and self.task_count >= 1, "need at least one domain and task")
        overlap = set(self.precursor_tokens) & set(self.noise_tokens)
        require(not overlap, f"precursor and noise vocabularies overlap: {sorted(overlap)}")


def label_prefixes(trajectory: RawTrajectory, horizon: int) -> PrefixLabelSet:
    """p_t = 1[y = 0 and t >= T - H] for t = 1..T (terminal prefix included)"""
    if horizon < 1:
        raise RejectedInputError(f"horizon must be >= 1, got {horizon}")
    if trajectory.length == 0:
        raise RejectedInputError(f"Trajectory {trajectory.trajectory_id} has no steps")
    labels = warning_labels(trajectory.length, trajectory.outcome, horizon)
    return PrefixLabelSet(trajectory.trajectory_id, horizon, labels)


def warning_labels(length: int, outcome: int, horizon: int) -> Tuple[int, ...]:
    """p_t for t = 1..T from the length and outcome alone"""
    if horizon < 1:
        raise RejectedInputError(f"horizon must be >= 1, got {horizon}")
    if length < 1:
        raise RejectedInputError("Trajectory length must be >= 1")
    failed = outcome == 0
    return tuple(int(failed and t >= length - horizon) for t in range(1, length + 1))


def positive_prefix_rate(labelsets: Iterable[PrefixLabelSet]) -> float:
    total = 0
    positive = 0
    for ls in labelsets:
        total += len(ls.labels)
        positive += ls.positives
    if total == 0:
        raise RejectedInputError("positive_prefix_rate needs at least one prefix")
    return positive / total


def _stratified_take(ids: List[str], strata: List[int], size: int, seed: int) -> Tuple[List[str], List[str]]:
    """Split `size` ids off `ids`, stratified by outcome when every class can supply two members"""
    if size <= 0:
        return list(ids), []
    if size >= len(ids):
        raise RejectedInputError(f"Cannot take {size} of {len(ids)} trajectories for a split")
    counts = np.bincount(strata, minlength=2)
    stratify = strata if counts.min() >= 2 and size >= 2 and len(ids) - size >= 2 else None
    keep, taken = train_test_split(ids, test_size=size, random_state=seed, shuffle=True, stratify=stratify)
    return list(keep), list(taken)


def make_splits(
    corpus: Sequence[RawTrajectory],
    train: float = 0.8,
    validation: float = 0.1,
    test: float = 0.1,
    calibration: float = 0.1,
    seed: int = 0,
) -> SplitSpec:
    """
    Partition a corpus into train / calibration / validation / test

    Sizes are rounded from the ratios; calibration is carved from the training
    pool. Sampling is stratified by outcome and deterministic for a fixed seed.
    """
    if abs(train + validation + test - 1.0) > 1e-9:
        raise RejectedInputError(f"Split ratios must sum to 1, got {train + validation + test}")
    if not 0.0 < calibration < 1.0:
        raise RejectedInputError(f"calibration fraction must lie in (0, 1), got {calibration}")
    if len(corpus) < 10:
        raise RejectedInputError(f"Need at least 10 trajectories to populate all splits, got {len(corpus)}")

    by_id = {t.trajectory_id: t for t in corpus}
    if len(by_id) != len(corpus):
        raise RejectedInputError("trajectory_id values must be unique within a corpus")
    ids = sorted(by_id)
    n = len(ids)
    n_test = int(round(test * n))
    n_val = int(round(validation * n))

    def outcomes(subset: List[str]) -> List[int]:
        return [by_id[i].outcome for i in subset]

    pool, test_ids = _stratified_take(ids, outcomes(ids), n_test, seed)
    pool = sorted(pool)
    pool, val_ids = _stratified_take(pool, outcomes(pool), n_val, seed + 1)
    pool = sorted(pool)
    n_cal = max(1, int(round(calibration * len(pool))))
    train_ids, cal_ids = _stratified_take(pool, outcomes(pool), n_cal, seed + 2)

    spec = SplitSpec(frozenset(train_ids), frozenset(cal_ids), frozenset(val_ids), frozenset(test_ids), seed)
    logging.info(
        "[Splits] Built splits | seed=%s | train=%s | calibration=%s | validation=%s | test=%s",
        seed, len(train_ids), len(cal_ids), len(val_ids), len(test_ids),
    )
    return spec


def select(corpus: Iterable[RawTrajectory], ids: Iterable[str]) -> List[RawTrajectory]:
    """Trajectories whose id is in `ids`, in corpus order"""
    wanted = set(ids)
    return [t for t in corpus if t.trajectory_id in wanted]


def _synth_step(
    rng: np.random.Generator,
    config: SynthConfig,
    index: int,
    domain: str,
    precursor: Optional[str],
) -> Dict[str, Any]:
    tool = config.tools[int(rng.integers(len(config.tools)))]
    noise = [config.noise_tokens[int(i)] for i in rng.integers(len(config.noise_tokens), size=3)]
    result = f"{noise[0]} {noise[1]} after {tool}"
    status = "ok"
    if precursor is not None:
        result = f"{precursor} {noise[1]} after {tool}"
        status = "error"
    return {
        "step_index": index,
        "role": "agent",
        "domain": domain,
        "observation": f"{domain} {noise[2]}\nview {noise[0]}",
        "thought": f"use {tool} on {noise[2]}",
        "tool": tool,
        "args": {"target": f"{noise[1]}_{int(rng.integers(100))}"},
        "result": result,
        "status": status,
    }


def generate_synthetic_corpus(config: SynthConfig) -> List[RawTrajectory]:
    """
    Deterministic corpus with lexical failure precursors

    Each failed trajectory is "precursor-bearing" independently per step: every
    step inside the final `injection_window` steps carries a precursor token (and
    an error status) with probability `precursor_probability`. Successful
    trajectories never contain precursor tokens.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    tasks = [
        (f"task-{k:02d}", config.domains[k % len(config.domains)]) for k in range(config.task_count)
    ]
    tail_p = 1.0 / (config.mean_length - config.min_length + 1.0)
    corpus: List[RawTrajectory] = []
    for i in range(config.trajectory_count):
        task_id, domain = tasks[int(rng.integers(len(tasks)))]
        length = min(config.min_length - 1 + int(rng.geometric(tail_p)), config.max_length)
        outcome = 0 if rng.random() < config.failure_rate else 1
        steps = []
        for t in range(1, length + 1):
            precursor = None
            in_window = t > length - config.injection_window
            if outcome == 0 and in_window and rng.random() < config.precursor_probability:
                precursor = config.precursor_tokens[int(rng.integers(len(config.precursor_tokens)))]
            steps.append(_synth_step(rng, config, t, domain, precursor))
        corpus.append(RawTrajectory(f"synth-{i:05d}", task_id, outcome, tuple(steps)))

    failures = sum(1 for t in corpus if t.outcome == 0)
    logging.info(
        "[Synth] Generated corpus | trajectories=%s | failures=%s | seed=%s",
        len(corpus), failures, config.seed,
    )
    return corpus


def _derived_seed(seed: int, trajectory_id: str, t: int) -> np.random.SeedSequence:
    digest = int(hashlib.sha256(trajectory_id.encode("utf-8")).hexdigest()[:12], 16)
    return np.random.SeedSequence([seed, t, digest])


def scramble_order(trajectory_id: str, t: int, seed: int) -> np.ndarray:
    """Deterministic permutation of the step indices 0..t-1 for one (trajectory, prefix)"""
    return np.random.default_rng(_derived_seed(seed, trajectory_id, t)).permutation(t)


def scramble_prefix(trajectory: RawTrajectory, t: int, seed: int) -> RawTrajectory:
    """
    Prefix of length t whose steps are permuted among themselves

    Only already-visible steps 1..t are used, so no future step leaks in. The
    caller keeps the original prefix label p_t of `trajectory`.
    """
    if not 1 <= t <= trajectory.length:
        raise RejectedInputError(f"Prefix index {t} outside 1..{trajectory.length}")
    order = scramble_order(trajectory.trajectory_id, t, seed)
    steps = tuple(trajectory.steps[int(i)] for i in order)
    return RawTrajectory(trajectory.trajectory_id, trajectory.task_id, trajectory.outcome, steps)
