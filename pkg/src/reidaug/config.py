"""Run configuration: one YAML/JSON file with a section per pipeline stage."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .baseline import BaselineTrainConfig
from .evalkit import EvalProtocol
from .gan import GanTrainConfig
from .occlude import OcclusionConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    """Directories to load, or the synthetic corpus used when they are absent."""

    train_dir: str | None = None
    query_dir: str | None = None
    gallery_dir: str | None = None
    synth_ids: int = 16
    synth_imgs_per_id: int = 8
    synth_height: int = 32
    synth_width: int = 16
    synth_cameras: int = 4
    synth_seed: int = 7
    test_ids: int = 16
    test_imgs_per_id: int = 8
    test_seed: int = 1007
    queries_per_id: int = 2

    def __post_init__(self):
        for name in ("synth_ids", "synth_imgs_per_id", "synth_cameras", "test_ids", "test_imgs_per_id",
                     "queries_per_id"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if (self.query_dir is None) != (self.gallery_dir is None):
            raise ValueError("query_dir and gallery_dir must be given together")


@dataclass(frozen=True)
class AugmentConfig:
    m: int = 0
    seed: int = 0
    use_for_baseline: bool = True
    grid_count: int = 8

    def __post_init__(self):
        if self.m < 0:
            raise ValueError("m must be non-negative")
        if self.grid_count < 0:
            raise ValueError("grid_count must be non-negative")


@dataclass(frozen=True)
class EvalConfig:
    exclude_same_id_same_cam: bool = True
    junk_ids: tuple[int, ...] = (-1,)
    query_mode: str = "single"
    pooling: str = "mean"
    score_unmatched_as_zero: bool = False
    occlude_test: bool = True
    rerank: bool = False
    k1: int = 20
    k2: int = 6
    rerank_lambda: float = 0.3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "junk_ids", tuple(int(j) for j in self.junk_ids))
        self.protocol()  # validates the protocol fields
        if not 1 <= self.k2 < self.k1:
            raise ValueError("need k1 > k2 >= 1")
        if not 0.0 <= self.rerank_lambda <= 1.0:
            raise ValueError("rerank_lambda must lie in [0, 1]")

    def protocol(self) -> EvalProtocol:
        return EvalProtocol(self.exclude_same_id_same_cam, self.junk_ids, self.query_mode, self.pooling,
                            self.score_unmatched_as_zero)


@dataclass(frozen=True)
class SensitivityConfig:
    # empty means (0, n, 2n) with n the training-set size
    m_values: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "m_values", tuple(int(m) for m in self.m_values))
        if any(m < 0 for m in self.m_values):
            raise ValueError("m_values must be non-negative")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    occlusion: OcclusionConfig = field(default_factory=OcclusionConfig)
    gan: GanTrainConfig = field(default_factory=GanTrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    baseline: BaselineTrainConfig = field(default_factory=BaselineTrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sensitivity: SensitivityConfig = field(default_factory=SensitivityConfig)


SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig) if f.name not in ("seed", "output_dir")}
_SECTION_TYPES = typing.get_type_hints(RunConfig)
_SEEDED = ("occlusion", "gan", "augment", "baseline", "eval")


def _coerce(hint, value, where: str):
    """Check scalars against the field type; numeric strings such as ``1e30`` become floats."""
    if value is None or hint in (bool, str) and isinstance(value, hint):
        return value
    if hint is float or typing.Optional[float] == hint:
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{where}: expected a number, got {value!r}") from None
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if hint is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if hint is bool and not isinstance(value, bool):
        raise ConfigError(f"{where}: expected true or false, got {value!r}")
    return value


def _build(cls, raw, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"unknown config key: {where}.{key}" if where else f"unknown config key: {key}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in raw.items():
        if dataclasses.is_dataclass(hints[key]):
            kwargs[key] = _build(hints[key], value, key)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = _coerce(hints[key], value, f"{where}.{key}" if where else key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _set_path(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def parse_overrides(items) -> list[tuple[str, object]]:
    out = []
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        out.append((key.strip(), yaml.safe_load(text)))
    return out


def build_config(raw: dict | None, overrides=()) -> RunConfig:
    """Validate a raw mapping (plus ``key=value`` overrides) into a :class:`RunConfig`.

    Sections without an explicit ``seed`` inherit the global one.
    """
    raw = json.loads(json.dumps(raw or {}))
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    for key, value in overrides:
        _set_path(raw, key, value)
    seed = raw.get("seed", 0)
    for name in _SEEDED:
        section = raw.setdefault(name, {})
        if isinstance(section, dict):
            section.setdefault("seed", seed)
    return _build(RunConfig, raw, "")


def load_config(path: str | Path | None, overrides=()) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return build_config(raw, overrides)


def to_dict(cfg) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        return v
    return {f.name: (to_dict(getattr(cfg, f.name)) if dataclasses.is_dataclass(getattr(cfg, f.name))
                     else plain(getattr(cfg, f.name)))
            for f in dataclasses.fields(cfg)}


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True)
