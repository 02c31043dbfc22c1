"""
File parsing utilities for corpora and split files
Supports: JSON Lines corpora (one trajectory per line), JSON split files
"""

import os
import csv
import json
import logging
from typing import Any, Dict, Iterable, Iterator, List, Optional, Tuple

from .errors import RejectedInputError
from .trace_model import RawTrajectory, SplitSpec


def parse_trajectory_line(line: str) -> Tuple[bool, Optional[RawTrajectory], str]:
    """
    Parse one corpus line into a trajectory

    Args:
        line: Raw JSON text of one trajectory

    Returns:
        Tuple of (success, trajectory, error_message)
    """
    try:
        payload = json.loads(line)
    except json.JSONDecodeError as e:
        return False, None, f"JSON error: {e}"
    if not isinstance(payload, dict):
        return False, None, "Expected a JSON object per line"
    steps = payload.get("steps")
    if not isinstance(steps, list) or not steps:
        return False, None, "Field 'steps' must be a nonempty list"
    try:
        return True, RawTrajectory.from_dict(payload), ""
    except RejectedInputError as e:
        return False, None, str(e)


def iter_jsonl(path: str) -> Iterator[Tuple[int, str]]:
    """Yield (line_number, text) for every nonblank line"""
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            if line.strip():
                yield number, line


def load_corpus(path: str) -> List[RawTrajectory]:
    """Load a JSONL corpus; every malformed line is reported before failing"""
    corpus: List[RawTrajectory] = []
    errors: List[str] = []
    for number, line in iter_jsonl(path):
        success, trajectory, error_msg = parse_trajectory_line(line)
        if success:
            corpus.append(trajectory)
        else:
            errors.append(f"line {number}: {error_msg}")

    if errors:
        for msg in errors[:10]:
            logging.warning("[FileParser] Rejected corpus line | path=%s | %s", path, msg)
        raise RejectedInputError(f"{len(errors)} malformed trajectories in {path}; first: {errors[0]}")

    ids = [t.trajectory_id for t in corpus]
    if len(set(ids)) != len(ids):
        raise RejectedInputError(f"Duplicate trajectory_id values in {path}")
    logging.info("[FileParser] Loaded corpus | path=%s | trajectories=%s", path, len(corpus))
    return corpus


def dumps_canonical(payload: Any) -> str:
    """Compact, key-sorted JSON; floats use repr so they reload bit-exactly"""
    return json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def write_jsonl(path: str, records: Iterable[Dict[str, Any]]) -> int:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(dumps_canonical(record))
            f.write("\n")
            count += 1
    return count


def save_corpus(path: str, corpus: Iterable[RawTrajectory]) -> int:
    count = write_jsonl(path, (t.to_dict() for t in corpus))
    logging.info("[FileParser] Saved corpus | path=%s | trajectories=%s", path, count)
    return count


def write_json(path: str, payload: Any) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, sort_keys=True, ensure_ascii=False, indent=2)
        f.write("\n")


def read_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def load_splits(path: str) -> SplitSpec:
    return SplitSpec.from_dict(read_json(path))


def save_splits(path: str, splits: SplitSpec) -> None:
    write_json(path, splits.to_dict())


def write_csv(path: str, rows: Iterable[Dict[str, Any]], columns: List[str]) -> int:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            count += 1
    return count
