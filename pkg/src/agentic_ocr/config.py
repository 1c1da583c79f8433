"""Run configuration: one YAML (or JSON) document, ``${VAR}`` interpolation from the
environment, command-line flags layered on top.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .agent import SessionConfig
from .errors import ConfigInvalid
from .metrics import MatchThresholds
from .pipeline import DEFAULT_TOP_K, InputConfig
from .reward import RewardConfig

_VAR_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


@dataclass
class Endpoint:
    endpoint: str | None = None
    name: str | None = None
    script: str | None = None  # scripted double fixture (model/generator/backend/verifier)
    timeout: float | None = None


@dataclass
class RunConfig:
    model: Endpoint = field(default_factory=Endpoint)
    backend: Endpoint = field(default_factory=Endpoint)
    reranker: Endpoint = field(default_factory=Endpoint)
    generator: Endpoint = field(default_factory=Endpoint)
    verifier: Endpoint = field(default_factory=Endpoint)
    thresholds: MatchThresholds = field(default_factory=MatchThresholds)
    reward: RewardConfig = field(default_factory=RewardConfig)
    session: SessionConfig = field(default_factory=SessionConfig)
    fan_out: int = 4
    top_k: int = DEFAULT_TOP_K
    expand_adjacent: bool = False
    input_configs: tuple[InputConfig, ...] = tuple(InputConfig)
    paths: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.fan_out < 1:
            raise ConfigInvalid("fan_out must be at least 1")
        if self.top_k < 1:
            raise ConfigInvalid("top_k must be at least 1")
        for key, value in self.paths.items():
            if key != "output" and not Path(value).exists():
                raise ConfigInvalid(f"paths.{key} does not exist: {value}")
        for ep in (self.model, self.backend, self.generator, self.verifier):
            if ep.script and not Path(ep.script).exists():
                raise ConfigInvalid(f"script fixture does not exist: {ep.script}")


def interpolate(value: Any, env: Mapping[str, str] | None = None) -> Any:
    env = os.environ if env is None else env
    if isinstance(value, str):
        def sub(m: re.Match) -> str:
            name = m.group(1)
            if name not in env:
                raise ConfigInvalid(f"environment variable {name} is not set")
            return env[name]

        return _VAR_RE.sub(sub, value)
    if isinstance(value, list):
        return [interpolate(v, env) for v in value]
    if isinstance(value, dict):
        return {k: interpolate(v, env) for k, v in value.items()}
    return value


def _build(cls, data: Any, section: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigInvalid(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigInvalid(f"unknown keys in {section!r}: {', '.join(sorted(unknown))}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"invalid {section!r}: {exc}") from exc


def from_mapping(data: Mapping[str, Any], env: Mapping[str, str] | None = None) -> RunConfig:
    data = interpolate(dict(data), env)
    kwargs: dict[str, Any] = {}
    for name in ("model", "backend", "reranker", "generator", "verifier"):
        if name in data:
            kwargs[name] = _build(Endpoint, data.pop(name), name)
    if "thresholds" in data:
        kwargs["thresholds"] = _build(MatchThresholds, data.pop("thresholds"), "thresholds")
    if "session" in data:
        kwargs["session"] = _build(SessionConfig, data.pop("session"), "session")
    if "reward" in data:
        raw = dict(data.pop("reward") or {})
        if "escalation_schedule" in raw:
            raw["escalation_schedule"] = {int(k): float(v) for k, v in raw["escalation_schedule"].items()}
        if "thresholds" in raw:
            raw["thresholds"] = _build(MatchThresholds, raw["thresholds"], "reward.thresholds")
        elif "thresholds" in kwargs:
            raw["thresholds"] = kwargs["thresholds"]
        kwargs["reward"] = _build(RewardConfig, raw, "reward")
    elif "thresholds" in kwargs:
        kwargs["reward"] = RewardConfig(thresholds=kwargs["thresholds"])
    if "input_configs" in data:
        try:
            kwargs["input_configs"] = tuple(InputConfig(c) for c in data.pop("input_configs"))
        except ValueError as exc:
            raise ConfigInvalid(str(exc)) from exc
    for key in ("fan_out", "top_k", "expand_adjacent", "paths"):
        if key in data:
            kwargs[key] = data.pop(key)
    if data:
        raise ConfigInvalid(f"unknown top-level keys: {', '.join(sorted(data))}")
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(str(exc)) from exc


def load(path: str | Path | None, env: Mapping[str, str] | None = None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"config {path} is not valid YAML/JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigInvalid(f"config {path} must be a mapping at top level")
    return from_mapping(data, env)
