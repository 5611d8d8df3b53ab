"""Run configuration: one YAML file with a section per module.

Precedence, lowest first: dataclass defaults, the config file, ``--set
section.key=value`` overrides on the command line.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import BackboneConfig, ContextConfig
from .errors import ConfigError, ResolutionError
from .objective import TrainConfig
from .synthesis import LambdaPolicy


@dataclass
class PreprocessSection:
    """Overrides for the backbone's own preprocessing constants; ``None`` keeps the default."""

    image_size: int | None = None
    mean: list | None = None
    std: list | None = None
    interpolation: str = "bicubic"


@dataclass
class SurgeryConfig:
    enabled: bool = True
    apply_context: bool = True
    vv_scale: float | None = None
    discrepancy: float = 0.1

    def __post_init__(self):
        if self.vv_scale is not None and not self.vv_scale > 0:
            raise ConfigError("must be > 0", "vv_scale")


@dataclass
class MaskingConfig:
    method: str = "discrepancy"
    topk: int = 1

    def __post_init__(self):
        if self.method not in ("discrepancy", "topk", "none"):
            raise ConfigError(f"must be one of discrepancy, topk, none; got {self.method!r}", "method")
        if int(self.topk) < 1:
            raise ConfigError("must be >= 1", "topk")


@dataclass
class ScoringConfig:
    include_unknown: bool = False


@dataclass
class OODSet:
    name: str
    root: str


@dataclass
class DataConfig:
    id_root: str | None = None
    shots: int = 1
    ood: list[OODSet] = field(default_factory=list)
    dump_outliers: bool = False

    def __post_init__(self):
        if int(self.shots) < 1:
            raise ConfigError("must be >= 1", "shots")


@dataclass
class RunConfig:
    run_id: str = "run"
    output_dir: str = "runs"
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    context: ContextConfig = field(default_factory=ContextConfig)
    surgery: SurgeryConfig = field(default_factory=SurgeryConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    synthesis: LambdaPolicy = field(default_factory=LambdaPolicy)
    train: TrainConfig = field(default_factory=TrainConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.run_id

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path

    def replace(self, **sections) -> "RunConfig":
        """Copy with per-section field updates, e.g. ``replace(train={"epochs": 2})``."""
        data = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        return from_dict(data)


def _build(cls, raw, path):
    if dataclasses.is_dataclass(cls):
        if raw is None:
            raw = {}
        if isinstance(raw, cls):
            return raw
        if not isinstance(raw, dict):
            raise ConfigError(f"expected a mapping, got {type(raw).__name__}", path or None)
        hints = typing.get_type_hints(cls)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - names
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError("unknown key", f"{path}.{key}" if path else key)
        kwargs = {k: _build(hints[k], v, f"{path}.{k}" if path else k) for k, v in raw.items()}
        try:
            return cls(**kwargs)
        except ConfigError as exc:
            inner = f"{path}.{exc.field}" if path and exc.field else (exc.field or path or None)
            msg = str(exc).split(": ", 1)[1] if exc.field else str(exc)
            raise ConfigError(msg, inner) from None
        except TypeError as exc:
            raise ConfigError(str(exc), path or None) from None
    origin = typing.get_origin(cls)
    args = typing.get_args(cls)
    if origin in (typing.Union, types.UnionType):
        if raw is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _build(inner[0], raw, path)
    if origin is list:
        if not isinstance(raw, list):
            raise ConfigError("expected a list", path)
        item = args[0] if args else None
        return [_build(item, v, f"{path}[{i}]") if item else v for i, v in enumerate(raw)]
    if cls is bool:
        if not isinstance(raw, bool):
            raise ConfigError(f"expected true/false, got {raw!r}", path)
        return raw
    if cls in (int, float):
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConfigError(f"expected a number, got {raw!r}", path)
        if cls is int and float(raw) != int(raw):
            raise ConfigError(f"expected an integer, got {raw!r}", path)
        return cls(raw)
    if cls is str:
        if not isinstance(raw, str):
            raise ConfigError(f"expected a string, got {raw!r}", path)
        return raw
    return raw


def from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw, "")


def apply_overrides(raw: dict, overrides) -> dict:
    """``["train.epochs=3", "data.ood=[...]"]``; values are parsed as YAML scalars."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = raw
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError("cannot override inside a non-mapping", key)
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def load_config(path=None, overrides=None) -> RunConfig:
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ResolutionError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must hold a mapping of sections")
    return from_dict(apply_overrides(raw, overrides))
