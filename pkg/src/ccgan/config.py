"""JSON configuration: strict parsing, dotted overrides and key suggestions."""

from __future__ import annotations

import dataclasses
import difflib
import json
import types
import typing
from pathlib import Path

from .losses import ConsistencyConfig, ConsistencyPlacement
from .schedule import ScheduleConfig
from .trainer import AdamConfig, AugmentSection, DataConfig, ModelSection, TrainConfig

ALIASES = {
    "lambda_cons": "schedule.lambda_cons_max",
    "consistency_on_labeled": "consistency.on_labeled",
    "epochs": "schedule.total_epochs",
    "placement": "consistency.placement.kind",
}


class ConfigError(ValueError):
    """Unknown key or invalid value in a configuration."""


def _field_types(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def known_keys(cls=TrainConfig, prefix: str = "") -> list[str]:
    out = []
    for name, tp in _field_types(cls).items():
        path = f"{prefix}{name}"
        if dataclasses.is_dataclass(tp):
            out.extend(known_keys(tp, path + "."))
        else:
            out.append(path)
    return out


def _unknown(key: str, candidates: list[str]) -> ConfigError:
    pool = candidates + list(ALIASES)
    leaves = {c.rsplit(".", 1)[-1]: c for c in pool}
    hint = difflib.get_close_matches(key, pool, n=1, cutoff=0.6)
    if not hint:
        leaf = difflib.get_close_matches(key.rsplit(".", 1)[-1], list(leaves), n=1, cutoff=0.6)
        hint = [leaves[leaf[0]]] if leaf else []
    msg = f"unknown config key {key!r}"
    if hint:
        msg += f"; did you mean {hint[0]!r}?"
    return ConfigError(msg)


def _coerce(value, tp, key: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, key)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if errors else f"bad value for {key}")
    if tp is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"{key} expects a boolean, got {value!r}")
    if tp is int:
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} expects an integer, got {value!r}") from None
    if tp is float:
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} expects a number, got {value!r}") from None
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key} expects a string, got {value!r}")
        return value
    return value


def _build(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'} must be an object")
    types_ = _field_types(cls)
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in types_:
            raise _unknown(path, known_keys(TrainConfig))
        tp = types_[key]
        if dataclasses.is_dataclass(tp):
            kwargs[key] = _build(tp, value, path + ".")
        else:
            kwargs[key] = _coerce(value, tp, path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {prefix.rstrip('.') or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> TrainConfig:
    return _build(TrainConfig, data)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=c`` strings to a nested config dict (values parsed as JSON when possible)."""
    data = json.loads(json.dumps(data))
    valid = known_keys(TrainConfig)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key = ALIASES.get(key.strip(), key.strip())
        if key not in valid:
            raise _unknown(key, valid)
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(raw)
    return data


def load_config(path=None, overrides: list[str] | None = None) -> TrainConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(apply_overrides(data, overrides or []))


def resolved_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


__all__ = [
    "ALIASES",
    "ConfigError",
    "ConsistencyConfig",
    "ConsistencyPlacement",
    "ScheduleConfig",
    "DataConfig",
    "ModelSection",
    "AugmentSection",
    "AdamConfig",
    "apply_overrides",
    "config_from_dict",
    "known_keys",
    "load_config",
    "resolved_dict",
]
