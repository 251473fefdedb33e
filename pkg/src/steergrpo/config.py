"""Run configuration: a YAML document mapped onto nested frozen dataclasses.

Grammar: a single YAML mapping whose top-level keys are the fields of
``RunConfig``. Sections (``task``, ``encoder``, ``schedule``, ``reward``,
``grpo``, ``pretrain``, ``eval``) are nested mappings; every key is optional
and falls back to its default. Unknown keys, wrong types and values that
break a module invariant are reported as ``path:line: message``.

Floats may be written ``1e-4``; YAML 1.1 would read that as a string, so
numeric strings are accepted wherever a float is expected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .grpo import GrpoConfig
from .reward import RewardSpec
from .synthlab import PRESETS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSection:
    preset: str = "basic8"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.seed < 0:
            raise ValueError("task seed must be >= 0")


@dataclass(frozen=True)
class EncoderSection:
    dim: int = 8
    seed: int = 7
    scale: float = 2.0

    def __post_init__(self) -> None:
        if self.dim < 3:
            raise ValueError("embedding dim must be >= 3 (data dim 2 plus an offset direction)")
        if self.scale <= 0:
            raise ValueError("encoder scale must be positive")


@dataclass(frozen=True)
class ScheduleSection:
    T: int = 10
    eta: float = 1.0
    alpha_bar_max: float = 0.995
    alpha_bar_min: float = 0.01

    def __post_init__(self) -> None:
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0, 1]")
        if not 0.0 < self.alpha_bar_min < self.alpha_bar_max <= 1.0:
            raise ValueError("need 0 < alpha_bar_min < alpha_bar_max <= 1")


@dataclass(frozen=True)
class PretrainSection:
    hidden: tuple[int, ...] = (64, 64)
    steps: int = 3000
    batch_size: int = 256
    lr: float = 3e-3
    cond_dropout: float = 0.1

    def __post_init__(self) -> None:
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ValueError("hidden must list at least one positive layer width")
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("steps >= 0, batch_size >= 1 and lr > 0 required")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValueError("cond_dropout must be in [0, 1)")


@dataclass(frozen=True)
class EvalSection:
    every: int = 0  # 0 evaluates only the final policy
    n_samples: int = 256
    seed: int = 12345

    def __post_init__(self) -> None:
        if self.every < 0 or self.n_samples < 1:
            raise ValueError("every >= 0 and n_samples >= 1 required")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    epochs: int = 300
    guidance: float = 1.0
    checkpoint_every: int = 100
    out: str = "runs/default"
    task: TaskSection = field(default_factory=TaskSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    reward: RewardSpec = field(default_factory=RewardSpec)
    grpo: GrpoConfig = field(default_factory=lambda: GrpoConfig(lr=1e-3))
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.epochs < 0 or self.checkpoint_every < 0:
            raise ValueError("epochs and checkpoint_every must be >= 0")
        if self.guidance < 0:
            raise ValueError("guidance must be >= 0")
        if self.epochs > 0 and self.schedule.eta <= 0:
            raise ValueError("training needs eta > 0 (eta = 0 is deterministic)")

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def digest(self) -> bytes:
        return hashlib.sha256(dump_config(self).encode("utf-8")).digest()


def _is_dataclass_type(tp: Any) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _coerce(value: Any, tp: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    if origin is typing.Literal:
        if value not in typing.get_args(tp):
            raise ConfigError(f"{where}: expected one of {typing.get_args(tp)}, got {value!r}")
        return value
    if origin is tuple:
        (elem, _) = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        return tuple(_coerce(v, elem, where) for v in value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type {tp!r}")


def _build(cls: type, node: yaml.Node, source: str, prefix: str) -> Any:
    line = node.start_mark.line + 1
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{source}:{line}: {prefix or 'config'} must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs: dict[str, Any] = {}
    for key_node, value_node in node.value:
        key = key_node.value
        kline = key_node.start_mark.line + 1
        dotted = f"{prefix}.{key}" if prefix else key
        if key not in names:
            raise ConfigError(f"{source}:{kline}: unknown key {dotted!r}; allowed: {sorted(names)}")
        if key in kwargs:
            raise ConfigError(f"{source}:{kline}: duplicate key {dotted!r}")
        tp = hints[key]
        if _is_dataclass_type(tp):
            kwargs[key] = _build(tp, value_node, source, dotted)
        else:
            value = yaml.safe_load(yaml.serialize(value_node))
            kwargs[key] = _coerce(value, tp, f"{source}:{kline}: {dotted}")
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{source}:{line}: {prefix or 'config'}: {exc}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ConfigError(f"{where}: {exc.problem}") from None
    if node is None:
        return RunConfig()
    return _build(RunConfig, node, source, "")


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def _plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    return obj


def dump_config(cfg: RunConfig) -> str:
    """Canonical YAML text; ``parse_config(dump_config(c)) == c``."""
    return yaml.safe_dump(_plain(cfg), sort_keys=False, default_flow_style=False)
