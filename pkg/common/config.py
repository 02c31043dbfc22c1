"""
Process-level defaults and helpers for typed JSON configs
"""

import os
import json
import dataclasses
from typing import Any, Dict, Type, TypeVar

from .errors import ConfigError

# Get configuration from environment variables
LOG_LEVEL = os.getenv("PREFIXGUARD_LOG_LEVEL", "INFO").upper()
DEFAULT_SEED = int(os.getenv("PREFIXGUARD_DEFAULT_SEED", "0"))
MAX_FIELD_CHARS = int(os.getenv("PREFIXGUARD_MAX_FIELD_CHARS", "4096"))

TOOLKIT_VERSION = "1.0.0"

C = TypeVar("C")


def config_from_dict(cls: Type[C], payload: Dict[str, Any]) -> C:
    """
    Build a frozen config dataclass from a plain dict

    Unknown keys are rejected; lists are converted to tuples so the
    result stays hashable. The instance's validate() is called if present.
    """
    if not isinstance(payload, dict):
        raise ConfigError(f"{cls.__name__} expects a JSON object, got {type(payload).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"Unknown {cls.__name__} keys: {', '.join(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in payload.items()}
    try:
        instance = cls(**values)
    except TypeError as e:
        raise ConfigError(f"Invalid {cls.__name__}: {e}") from e
    validate = getattr(instance, "validate", None)
    if callable(validate):
        validate()
    return instance


def config_to_dict(config: Any) -> Dict[str, Any]:
    """Materialise every field, defaults included"""
    out = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def load_config(cls: Type[C], path: str) -> C:
    """Load a config dataclass from a JSON file"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    return config_from_dict(cls, payload)


def require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)
