"""
StepView adapter execution and canonical serialization

An adapter spec is declarative JSON. Each target field names one selector:

    key:<name>                 top-level key lookup
    path:<a.b.0.c>             dotted path (integers index lists)
    regex:<path>:<pattern>     first capture group (or whole match) on the value at <path>
    const:<text>               fixed text
    none                       always empty

No generated code is ever executed; new selector kinds are added to
`_SELECTORS`.
"""

import re
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from common.config import MAX_FIELD_CHARS, config_from_dict, config_to_dict, require
from common.errors import ConfigError, RejectedInputError, StepParseError
from common.file_parser import dumps_canonical, iter_jsonl, write_jsonl
from common.trace_model import RawTrajectory

SENTINEL = "unknown"
FIELDS = ("metadata", "observation", "action", "tool", "args", "result", "status")
OK_STATUSES = frozenset({"ok", "success", ""})
ERROR_LEXICON = re.compile(
    r"\b(error|exception|traceback|fail(ed|ure)?|denied|timeout|timed out|not found|invalid|refused|crash(ed)?)\b",
    re.IGNORECASE,
)


@dataclass(frozen=True)
class StepViewRecord:
    metadata_lines: Tuple[str, ...] = ()
    observation_lines: Tuple[str, ...] = ()
    action_text: str = ""
    tool_name: str = SENTINEL
    tool_args_text: str = ""
    result_text: str = ""
    status: str = SENTINEL

    def to_dict(self) -> Dict[str, Any]:
        return {
            "metadata_lines": list(self.metadata_lines),
            "observation_lines": list(self.observation_lines),
            "action_text": self.action_text,
            "tool_name": self.tool_name,
            "tool_args_text": self.tool_args_text,
            "result_text": self.result_text,
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "StepViewRecord":
        try:
            return cls(
                metadata_lines=tuple(str(x) for x in payload.get("metadata_lines", ())),
                observation_lines=tuple(str(x) for x in payload.get("observation_lines", ())),
                action_text=str(payload.get("action_text", "")),
                tool_name=str(payload.get("tool_name") or SENTINEL),
                tool_args_text=str(payload.get("tool_args_text", "")),
                result_text=str(payload.get("result_text", "")),
                status=str(payload.get("status") or SENTINEL),
            )
        except AttributeError as e:
            raise RejectedInputError(f"Malformed StepView record: {e}") from e


@dataclass(frozen=True)
class AdapterSpec:
    version: str = "1"
    metadata_sources: Tuple[str, ...] = ()
    observation_source: str = "none"
    observation_unit: str = "line"
    observation_reducer: str = "head"
    max_observation_units: int = 8
    action_source: str = "none"
    tool_source: str = "none"
    args_source: str = "none"
    result_source: str = "none"
    status_source: str = "none"
    status_derive: str = "sentinel"
    tool_aliases: Mapping[str, str] = field(default_factory=dict)
    known_tools: Tuple[str, ...] = ()

    def validate(self) -> None:
        selectors = (
            list(self.metadata_sources)
            + [self.observation_source, self.action_source, self.tool_source,
               self.args_source, self.result_source, self.status_source]
        )
        for selector in selectors:
            parse_selector(selector)
        require(self.observation_unit in ("line", "whole"), f"observation_unit must be line|whole, got {self.observation_unit!r}")
        require(self.observation_reducer in ("head", "tail"), f"observation_reducer must be head|tail, got {self.observation_reducer!r}")
        require(self.max_observation_units >= 1, "max_observation_units must be >= 1")
        require(self.status_derive in ("sentinel", "from_result"), f"status_derive must be sentinel|from_result, got {self.status_derive!r}")
        require(isinstance(self.tool_aliases, Mapping), "tool_aliases must be an object")

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "AdapterSpec":
        return config_from_dict(cls, payload)

    def to_dict(self) -> Dict[str, Any]:
        out = config_to_dict(self)
        out["tool_aliases"] = dict(sorted(self.tool_aliases.items()))
        return out


def default_synthetic_spec() -> AdapterSpec:
    """Identity-style spec for corpora produced by generate_synthetic_corpus"""
    return AdapterSpec(
        metadata_sources=("key:role", "key:domain"),
        observation_source="key:observation",
        action_source="key:thought",
        tool_source="key:tool",
        args_source="key:args",
        result_source="key:result",
        status_source="key:status",
    )


def load_adapter_spec(path: str) -> AdapterSpec:
    with open(path, "r", encoding="utf-8") as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Adapter spec {path} is not valid JSON: {e}") from e
    return AdapterSpec.from_dict(payload)


# ----------------------------------------------------------------------------
# Selector engine
# ----------------------------------------------------------------------------

_MISSING = object()


def parse_selector(selector: str) -> Tuple[str, Tuple[str, ...]]:
    if not isinstance(selector, str):
        raise ConfigError(f"Selector must be a string, got {selector!r}")
    if selector == "none":
        return "none", ()
    kind, sep, rest = selector.partition(":")
    if not sep or kind not in _SELECTORS:
        raise ConfigError(f"Unsupported selector {selector!r}")
    if kind == "regex":
        path, sep, pattern = rest.partition(":")
        if not sep or not path:
            raise ConfigError(f"regex selector needs regex:<path>:<pattern>, got {selector!r}")
        try:
            re.compile(pattern)
        except re.error as e:
            raise ConfigError(f"Bad pattern in {selector!r}: {e}") from e
        return kind, (path, pattern)
    if kind in ("key", "path") and not rest:
        raise ConfigError(f"Selector {selector!r} names no field")
    return kind, (rest,)


def _walk(document: Any, path: str) -> Any:
    node = document
    for part in path.split("."):
        if isinstance(node, Mapping) and part in node:
            node = node[part]
        elif isinstance(node, list) and part.lstrip("-").isdigit() and -len(node) <= int(part) < len(node):
            node = node[int(part)]
        else:
            return _MISSING
    return node


def _select_key(step: Mapping[str, Any], args: Tuple[str, ...]) -> Any:
    return step.get(args[0], _MISSING)


def _select_path(step: Mapping[str, Any], args: Tuple[str, ...]) -> Any:
    return _walk(step, args[0])


def _select_regex(step: Mapping[str, Any], args: Tuple[str, ...]) -> Any:
    value = _walk(step, args[0])
    if value is _MISSING:
        return _MISSING
    match = re.search(args[1], stringify(value))
    if match is None:
        return _MISSING
    return match.group(1) if match.groups() else match.group(0)


def _select_const(step: Mapping[str, Any], args: Tuple[str, ...]) -> Any:
    return args[0]


_SELECTORS = {
    "key": _select_key,
    "path": _select_path,
    "regex": _select_regex,
    "const": _select_const,
}


def stringify(value: Any) -> str:
    if value is _MISSING or value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, bool):
        return "true" if value else "false"
    return dumps_canonical(value)


def extract(step: Mapping[str, Any], selector: str) -> str:
    kind, args = parse_selector(selector)
    if kind == "none":
        return ""
    return stringify(_SELECTORS[kind](step, args))


def _selector_label(selector: str) -> str:
    kind, args = parse_selector(selector)
    if kind in ("key", "path"):
        return args[0].split(".")[-1]
    if kind == "regex":
        return args[0].split(".")[-1]
    return kind


def _observation_units(spec: AdapterSpec, text: str) -> Tuple[str, ...]:
    if not text:
        return ()
    if spec.observation_unit == "whole":
        units = [text]
    else:
        units = [line.strip() for line in text.splitlines() if line.strip()]
    if spec.observation_reducer == "tail":
        units = units[-spec.max_observation_units:]
    else:
        units = units[:spec.max_observation_units]
    return tuple(units)


def coerce_step(raw_step: Any, step_index: int) -> Mapping[str, Any]:
    """Raw steps are JSON objects, or strings holding one"""
    if isinstance(raw_step, Mapping):
        return raw_step
    if isinstance(raw_step, str):
        try:
            parsed = json.loads(raw_step)
        except json.JSONDecodeError as e:
            raise StepParseError(f"not a JSON document ({e.msg})", step_index) from e
        if isinstance(parsed, Mapping):
            return parsed
    raise StepParseError(f"expected a JSON object, got {type(raw_step).__name__}", step_index)


def adapt_step(spec: AdapterSpec, raw_step: Any, step_index: int = 0) -> Tuple[StepViewRecord, bool]:
    """Record plus whether the unknown-tool fallback was taken"""
    step = coerce_step(raw_step, step_index)

    status = extract(step, spec.status_source).strip()
    result = extract(step, spec.result_source)
    if not status:
        if spec.status_derive == "from_result" and result:
            status = "error" if ERROR_LEXICON.search(result) else "ok"
        else:
            status = SENTINEL

    tool = extract(step, spec.tool_source).strip()
    tool = spec.tool_aliases.get(tool, tool)
    expects_tool = spec.tool_source != "none"
    unknown = expects_tool and (not tool or (spec.known_tools and tool not in spec.known_tools))
    if unknown:
        return StepViewRecord(tool_name=SENTINEL, result_text=dumps_canonical(step), status=status), True

    metadata = []
    for selector in spec.metadata_sources:
        value = extract(step, selector)
        if value:
            metadata.append(f"{_selector_label(selector)}={value}")
    record = StepViewRecord(
        metadata_lines=tuple(metadata),
        observation_lines=_observation_units(spec, extract(step, spec.observation_source)),
        action_text=extract(step, spec.action_source),
        tool_name=tool or SENTINEL,
        tool_args_text=extract(step, spec.args_source),
        result_text=result,
        status=status,
    )
    return record, False


def apply_adapter(spec: AdapterSpec, raw_step: Any, step_index: int = 0) -> StepViewRecord:
    return adapt_step(spec, raw_step, step_index)[0]


# ----------------------------------------------------------------------------
# Canonical text
# ----------------------------------------------------------------------------

def _clip(text: str, limit: int) -> str:
    return text if len(text) <= limit else text[:limit]


def serialize_record(
    record: StepViewRecord,
    exclude: Iterable[str] = (),
    max_field_chars: int = MAX_FIELD_CHARS,
) -> str:
    """
    METADATA=[..] OBSERVATION=[..] ACTION=[action=..; tool=..; args=..] RESULT=[status=..; text=..]

    Lines inside METADATA / OBSERVATION are joined with " | ". Excluded
    fields are emitted empty so the block skeleton never changes.
    """
    dropped = set(exclude)
    unknown = dropped - set(FIELDS)
    if unknown:
        raise RejectedInputError(f"Unknown StepView fields in exclude: {sorted(unknown)}")

    def value(name: str, text: str) -> str:
        return "" if name in dropped else _clip(text, max_field_chars)

    metadata = value("metadata", " | ".join(record.metadata_lines))
    observation = value("observation", " | ".join(record.observation_lines))
    action = value("action", record.action_text)
    tool = value("tool", record.tool_name or SENTINEL)
    args = value("args", record.tool_args_text)
    status = value("status", record.status or SENTINEL)
    result = value("result", record.result_text)
    return (
        f"METADATA=[{metadata}] OBSERVATION=[{observation}] "
        f"ACTION=[action={action}; tool={tool}; args={args}] "
        f"RESULT=[status={status}; text={result}]"
    )


# ----------------------------------------------------------------------------
# Coverage and corpus conversion
# ----------------------------------------------------------------------------

def _filled(record: StepViewRecord) -> Dict[str, bool]:
    return {
        "metadata": bool(record.metadata_lines),
        "observation": bool(record.observation_lines),
        "action": bool(record.action_text),
        "tool": record.tool_name not in ("", SENTINEL),
        "args": bool(record.tool_args_text),
        "result": bool(record.result_text),
        "status": record.status not in ("", SENTINEL),
    }


def validate_adapter(spec: AdapterSpec, corpus: Iterable[RawTrajectory]) -> Dict[str, Any]:
    """
    Per-field fill rates and the fallback rate of `spec` over every step

    tool and status are always populated; a step holding only the sentinel
    counts under `sentinel`, not `filled`.
    """
    steps = 0
    fallbacks = 0
    filled = {name: 0 for name in FIELDS}
    for trajectory in corpus:
        for i, raw in enumerate(trajectory.steps, start=1):
            record, fell_back = adapt_step(spec, raw, i)
            steps += 1
            fallbacks += fell_back
            for name, ok in _filled(record).items():
                filled[name] += ok

    fields = {}
    for name in FIELDS:
        entry = {"filled": filled[name], "fill_rate": filled[name] / steps if steps else 0.0}
        if name in ("tool", "status"):
            entry["sentinel"] = steps - filled[name]
        fields[name] = entry
    report = {
        "steps": steps,
        "fallbacks": fallbacks,
        "fallback_rate": fallbacks / steps if steps else 0.0,
        "fields": fields,
    }
    logging.info(
        "[StepView] Coverage | steps=%s | fallback_rate=%.4f | tool_fill=%.4f | status_fill=%.4f | result_fill=%.4f",
        steps, report["fallback_rate"], fields["tool"]["fill_rate"],
        fields["status"]["fill_rate"], fields["result"]["fill_rate"],
    )
    return report


@dataclass(frozen=True)
class StepViewTrajectory:
    trajectory_id: str
    task_id: str
    outcome: int
    records: Tuple[StepViewRecord, ...]

    @property
    def length(self) -> int:
        return len(self.records)

    def texts(self, exclude: Sequence[str] = ()) -> List[str]:
        return [serialize_record(r, exclude=exclude) for r in self.records]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "trajectory_id": self.trajectory_id,
            "task_id": self.task_id,
            "outcome": self.outcome,
            "stepview": [r.to_dict() for r in self.records],
        }


def convert_trajectory(spec: AdapterSpec, trajectory: RawTrajectory) -> StepViewTrajectory:
    records = tuple(apply_adapter(spec, raw, i) for i, raw in enumerate(trajectory.steps, start=1))
    return StepViewTrajectory(trajectory.trajectory_id, trajectory.task_id, trajectory.outcome, records)


def convert_corpus(spec: AdapterSpec, corpus: Iterable[RawTrajectory]) -> List[StepViewTrajectory]:
    return [convert_trajectory(spec, t) for t in corpus]


def save_stepview_corpus(path: str, corpus: Iterable[StepViewTrajectory]) -> int:
    return write_jsonl(path, (t.to_dict() for t in corpus))


def load_stepview_corpus(path: str) -> List[StepViewTrajectory]:
    out: List[StepViewTrajectory] = []
    seen = set()
    for number, line in iter_jsonl(path):
        try:
            payload = json.loads(line)
            records = tuple(StepViewRecord.from_dict(r) for r in payload["stepview"])
            trajectory = StepViewTrajectory(
                str(payload["trajectory_id"]), str(payload.get("task_id", "")), int(payload["outcome"]), records,
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise RejectedInputError(f"{path} line {number}: malformed StepView trajectory ({e})") from e
        if not records:
            raise RejectedInputError(f"{path} line {number}: trajectory has no steps")
        if trajectory.outcome not in (0, 1):
            raise RejectedInputError(f"{path} line {number}: outcome must be 0 or 1")
        if trajectory.trajectory_id in seen:
            raise RejectedInputError(f"{path} line {number}: duplicate trajectory_id {trajectory.trajectory_id}")
        seen.add(trajectory.trajectory_id)
        out.append(trajectory)
    logging.info("[StepView] Loaded StepView corpus | path=%s | trajectories=%s", path, len(out))
    return out
