"""Experiment configuration: YAML files with a strict key schema."""
from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .models import ModelKind
from .videodata import PatternKind

MODES = ("single", "targeted", "universal", "ensemble", "fs")
METHODS = ("appended", "whole", "both")
FORMATS = ("csv", "json")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class DatasetSection:
    K: int = 4
    clips_per_class: int = 40
    T: int = 12
    W: int = 16
    H: int = 16
    C: int = 1
    noise: float = 0.05
    shape_size: int = 4
    speed: float = 1.0
    test_fraction: float = 0.1
    seed: int = 0
    # clips the attacks are evaluated on, drawn from a separate seed
    eval_clips_per_class: int = 16
    eval_seed: int = 1


@dataclass
class ModelSection:
    kinds: list[str] = field(default_factory=lambda: [k.value for k in ModelKind])
    hidden: dict[str, dict[str, int]] = field(default_factory=dict)
    epochs: int | None = None
    lr: float = 0.01
    batch_size: int = 8
    card_rate: float = 0.1
    seed: int = 0


@dataclass
class AttackSection:
    mode: str = "single"
    method: str = "both"
    delta_t: int = 2
    pattern: str = PatternKind.GLYPH_ON_DARK.value
    lam: float = 0.0
    p: float = math.inf
    step_size: float = 0.01
    max_iters: int | None = None
    stop_on_success: bool = True
    stop_threshold: float = 0.001
    patience: int = 0
    target_label: int | None = None
    spatial_rate: float | None = None
    pattern_mask: bool = False
    lam_l: float = 0.0
    layer: int | None = None
    feature_p: float = 2.0
    universal_batch: int = 8
    max_videos: int | None = None
    coherence_videos: int = 20
    seed: int = 0


@dataclass
class ReportSection:
    format: str = "csv"
    out: str = "results"
    include_timing: bool = False


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    attack: AttackSection = field(default_factory=AttackSection)
    report: ReportSection = field(default_factory=ReportSection)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["attack"]["p"] == math.inf:
            d["attack"]["p"] = "inf"
        if d["attack"]["feature_p"] == math.inf:
            d["attack"]["feature_p"] = "inf"
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self) -> str:
        return hashlib.sha256(self.to_yaml().encode()).hexdigest()[:16]

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some fields changed, e.g. ``replace(attack={"lam_l": 0.1})``."""
        d = self.to_dict()
        for name, changes in sections.items():
            if name not in d:
                raise ConfigError(name, "unknown section")
            d[name].update(changes)
        return from_dict(d)


_SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "attack": AttackSection,
    "report": ReportSection,
}


def _coerce(path: str, value, annotation: str):
    optional = "None" in annotation
    if value is None:
        if optional:
            return None
        raise ConfigError(path, "may not be null")
    base = annotation.replace(" | None", "")
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if base == "float":
        if isinstance(value, str) and value.lower() in ("inf", ".inf"):
            return math.inf
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if base.startswith("list"):
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(path, "expected a list of strings")
        return list(value)
    if base.startswith("dict"):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected a mapping")
        out = {}
        for k, v in value.items():
            if not isinstance(v, dict) or not all(isinstance(x, int) and not isinstance(x, bool) for x in v.values()):
                raise ConfigError(f"{path}.{k}", "expected a mapping of integer sizes")
            out[str(k)] = dict(v)
        return out
    raise ConfigError(path, f"unsupported field type {annotation}")


def from_dict(data: dict | None) -> ExperimentConfig:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a mapping")
    for key in data:
        if key not in _SECTIONS:
            raise ConfigError(str(key), "unknown section")
    sections = {}
    for name, cls in _SECTIONS.items():
        raw = data.get(name)
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(name, "expected a mapping")
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key not in fields:
                raise ConfigError(f"{name}.{key}", "unknown key")
            kwargs[key] = _coerce(f"{name}.{key}", value, fields[key].type)
        sections[name] = cls(**kwargs)
    cfg = ExperimentConfig(**sections)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig):
    d, m, a, r = cfg.dataset, cfg.model, cfg.attack, cfg.report
    for key in ("K", "clips_per_class", "T", "W", "H", "C", "shape_size", "eval_clips_per_class"):
        if getattr(d, key) < 1:
            raise ConfigError(f"dataset.{key}", "must be positive")
    if d.K < 2:
        raise ConfigError("dataset.K", "need at least two classes")
    if not 0.0 <= d.noise <= 0.05:
        raise ConfigError("dataset.noise", "must lie in [0, 0.05]")
    if not 0.0 < d.test_fraction < 1.0:
        raise ConfigError("dataset.test_fraction", "must lie in (0, 1)")
    if not m.kinds:
        raise ConfigError("model.kinds", "empty model list")
    for i, k in enumerate(m.kinds):
        if k not in {x.value for x in ModelKind}:
            raise ConfigError(f"model.kinds[{i}]", f"unknown model kind {k!r}")
    for k in m.hidden:
        if k not in m.kinds:
            raise ConfigError(f"model.hidden.{k}", "hidden sizes for a model that is not configured")
    if m.epochs is not None and m.epochs < 0:
        raise ConfigError("model.epochs", "must be non-negative")
    if m.lr <= 0:
        raise ConfigError("model.lr", "must be positive")
    if m.batch_size < 1:
        raise ConfigError("model.batch_size", "must be positive")
    if not 0.0 <= m.card_rate <= 1.0:
        raise ConfigError("model.card_rate", "must lie in [0, 1]")
    if a.mode not in MODES:
        raise ConfigError("attack.mode", f"must be one of {MODES}")
    if a.method not in METHODS:
        raise ConfigError("attack.method", f"must be one of {METHODS}")
    if a.delta_t < 0:
        raise ConfigError("attack.delta_t", "must be non-negative")
    if a.pattern not in {x.value for x in PatternKind}:
        raise ConfigError("attack.pattern", f"unknown pattern {a.pattern!r}")
    if a.p not in (1, 2, math.inf):
        raise ConfigError("attack.p", "must be 1, 2 or inf")
    if a.feature_p not in (1, 2, math.inf):
        raise ConfigError("attack.feature_p", "must be 1, 2 or inf")
    if a.step_size <= 0:
        raise ConfigError("attack.step_size", "must be positive")
    if a.max_iters is not None and a.max_iters < 1:
        raise ConfigError("attack.max_iters", "must be positive")
    if a.lam < 0:
        raise ConfigError("attack.lam", "must be non-negative")
    if a.lam_l < 0:
        raise ConfigError("attack.lam_l", "must be non-negative")
    if a.target_label is not None and not 0 <= a.target_label < d.K:
        raise ConfigError("attack.target_label", f"must lie in [0, {d.K})")
    if a.spatial_rate is not None and not 0.0 <= a.spatial_rate <= 1.0:
        raise ConfigError("attack.spatial_rate", "must lie in [0, 1]")
    if a.universal_batch < 1:
        raise ConfigError("attack.universal_batch", "must be positive")
    if a.max_videos is not None and a.max_videos < 1:
        raise ConfigError("attack.max_videos", "must be positive")
    if a.coherence_videos < 0:
        raise ConfigError("attack.coherence_videos", "must be non-negative")
    if r.format not in FORMATS:
        raise ConfigError("report.format", f"must be one of {FORMATS}")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(str(path), "config file not found")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(str(path), f"not valid YAML: {e}") from None
    return from_dict(data)


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(cfg.to_yaml())
    return path
