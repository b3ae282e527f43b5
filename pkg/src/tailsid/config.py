"""Strict JSON configuration parsing for runs.

A run configuration has a single top-level seed plus optional `stream`,
`model` and `train` sections. Unknown keys are rejected with their full key
path; defaults are applied and echoed back, so a persisted manifest lists
every effective value. Section seeds are derived from the top-level seed
unless a section supplies its own.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass

from .errors import ConfigError
from .metamodel import ModelConfig
from .seeds import derive_seed
from .sysgen import TaskStreamConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class ConfigBundle:
    seed: int
    stream: TaskStreamConfig
    model: ModelConfig
    train: TrainConfig

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "stream": dataclasses.asdict(self.stream),
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
        }


def _check_scalar(value, ftype, path: str):
    origin = typing.get_origin(ftype)
    if origin in (typing.Union, types.UnionType):
        for arg in typing.get_args(ftype):
            try:
                return _check_scalar(value, arg, path)
            except ConfigError:
                continue
        raise ConfigError(f"{path}: expected one of {typing.get_args(ftype)}")
    if origin is tuple:
        args = typing.get_args(ftype)
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{path}: expected a list of {len(args)} values")
        return tuple(
            _check_scalar(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args))
        )
    if ftype is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if ftype is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if ftype is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if ftype is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported config value type {ftype!r}")


def dataclass_from_dict(cls, data: dict, path: str):
    """Build a config dataclass from a JSON mapping, rejecting unknown keys
    and type mismatches with their full key path."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    hints = typing.get_type_hints(cls)
    field_map = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(field_map)
    if unknown:
        name = sorted(unknown)[0]
        raise ConfigError(f"{path}.{name}: unknown key")
    kwargs = {}
    for name, value in data.items():
        ftype = hints[name]
        if dataclasses.is_dataclass(ftype):
            kwargs[name] = dataclass_from_dict(ftype, value, f"{path}.{name}")
        else:
            kwargs[name] = _check_scalar(value, ftype, f"{path}.{name}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def bundle_from_dict(data: dict) -> ConfigBundle:
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be an object")
    unknown = set(data) - {"seed", "stream", "model", "train"}
    if unknown:
        raise ConfigError(f"config.{sorted(unknown)[0]}: unknown key")
    seed = _check_scalar(data.get("seed", 0), int, "config.seed")
    if seed < 0 or seed >= 2**64:
        raise ConfigError("config.seed: must be an unsigned 64-bit integer")

    stream_data = dict(data.get("stream", {}))
    if "seed" not in stream_data:
        stream_data["seed"] = derive_seed(seed, "tasks")
    train_data = dict(data.get("train", {}))
    if "seed" not in train_data:
        train_data["seed"] = derive_seed(seed, "train")

    stream = dataclass_from_dict(TaskStreamConfig, stream_data, "config.stream")
    model = dataclass_from_dict(ModelConfig, dict(data.get("model", {})), "config.model")
    train = dataclass_from_dict(TrainConfig, train_data, "config.train")
    return ConfigBundle(seed=seed, stream=stream, model=model, train=train)


def parse_config(path) -> ConfigBundle:
    """Load and validate a run configuration file."""
    try:
        with open(path, "r") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}")
    return bundle_from_dict(data)
