"""Run configuration: nested dataclasses loaded from YAML plus ``key=value`` flags.

Defaults are the training hyperparameters used by the method (batch 64,
momentum 0.9, weight decay 1e-5, last-layer LR 0.2 with 0.99 layer-wise
decay, cutmix/mixup participation 0.6/0.4). Unknown keys are rejected.
"""
import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional, get_args, get_origin, get_type_hints

import yaml

from .errors import ConfigError
from .sleep import POLICIES, SleepConfig

MODES = ("siesta", "awake_only", "remind", "offline_oracle")
ORDERINGS = ("iid", "class_incremental", "custom")


@dataclass
class DataConfig:
    source: str = "digits"          # digits | idx | features | synthetic
    images: str = ""
    labels: str = ""
    features: str = ""
    cache_dir: str = ".siesta-data"
    r: int = 4
    s: int = 4
    d: int = 16
    patch: int = 4
    extractor_seed: int = 1234
    eval_fraction: float = 0.3
    split_seed: int = 0
    # synthetic generator
    n_classes: int = 10
    per_class: int = 200
    eval_per_class: int = 40
    noise: float = 1.0
    separation: float = 1.0
    zipf: float = 0.0
    min_per_class: int = 5
    synthetic_seed: int = 0


@dataclass
class ModelConfig:
    embed_dim: int = 32
    tau: float = 0.1


@dataclass
class PQConfig:
    n_codebooks: int = 8
    codebook_size: int = 256
    iterations: int = 25
    restarts: int = 3
    rotation: bool = False
    rotation_iterations: int = 10


@dataclass
class BufferConfig:
    capacity_bytes: int = 10_000_000


@dataclass
class BaseConfig:
    epochs: int = 50
    policy: str = "uniform"


@dataclass
class PlanConfig:
    mode: str = "siesta"
    ordering: str = "class_incremental"
    permutation: List[int] = field(default_factory=list)
    class_order: List[int] = field(default_factory=list)
    base_classes: int = 5
    sleep_every_samples: int = 0
    sleep_every_classes: int = 2
    sleep_at_end: bool = True
    policy: str = "balanced_uniform"
    remind_rehearsal: int = 50
    remind_lr: float = 0.01
    offline_updates: int = 0
    update_cap: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pq: PQConfig = field(default_factory=PQConfig)
    buffer: BufferConfig = field(default_factory=BufferConfig)
    base: BaseConfig = field(default_factory=BaseConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    sleep: SleepConfig = field(default_factory=lambda: SleepConfig(updates=3200))

    def validate(self):
        p = self.plan
        if p.mode not in MODES:
            raise ConfigError(f"plan.mode: {p.mode!r} not in {MODES}")
        if p.ordering not in ORDERINGS:
            raise ConfigError(f"plan.ordering: {p.ordering!r} not in {ORDERINGS}")
        if p.policy not in POLICIES:
            raise ConfigError(f"plan.policy: {p.policy!r} not in {POLICIES}")
        if self.base.policy not in POLICIES:
            raise ConfigError(f"base.policy: {self.base.policy!r} not in {POLICIES}")
        if p.base_classes < 1:
            raise ConfigError("plan.base_classes must be >= 1")
        if p.sleep_every_samples < 0 or p.sleep_every_classes < 0:
            raise ConfigError("plan.sleep_every_*: must be >= 0")
        if p.sleep_every_samples == 0 and p.sleep_every_classes == 0 and not p.sleep_at_end:
            raise ConfigError("plan: no sleep frequency configured")
        for name in ("remind_rehearsal", "offline_updates", "update_cap"):
            if getattr(p, name) < 0:
                raise ConfigError(f"plan.{name} must be >= 0")
        if self.data.source not in ("digits", "idx", "features", "synthetic"):
            raise ConfigError(f"data.source: unknown source {self.data.source!r}")
        if not 0.0 < self.data.eval_fraction < 1.0:
            raise ConfigError("data.eval_fraction must lie in (0, 1)")
        if self.data.d % self.pq.n_codebooks:
            raise ConfigError(f"data.d={self.data.d} not divisible by pq.n_codebooks={self.pq.n_codebooks}")
        if not 1 <= self.pq.codebook_size <= 256:
            raise ConfigError("pq.codebook_size must lie in [1, 256]")
        if self.model.tau <= 0:
            raise ConfigError("model.tau must be positive")
        if self.base.epochs < 0:
            raise ConfigError("base.epochs must be >= 0")
        try:
            self.sleep.validate()
        except ConfigError as exc:
            raise ConfigError(f"sleep: {exc}") from exc
        return self


def _coerce(value, tp, path):
    origin = get_origin(tp)
    if origin in (list, List):
        (inner,) = get_args(tp)
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return [_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is Optional or (origin is not None and type(None) in get_args(tp)):
        if value is None:
            return None
        tp = [a for a in get_args(tp) if a is not type(None)][0]
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return _merge(tp(), value, path)
    if tp is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{path}: expected true/false, got {value!r}")
    if tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if tp is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    raise ConfigError(f"{path}: unsupported type {tp}")


def _merge(default, values, prefix):
    hints = get_type_hints(type(default))
    for key, value in values.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in hints:
            raise ConfigError(f"{path}: unknown key")
        cur = getattr(default, key)
        if dataclasses.is_dataclass(cur):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a mapping")
            setattr(default, key, _merge(cur, value, path))
        else:
            setattr(default, key, _coerce(value, hints[key], path))
    return default


def _set_path(tree, dotted, value):
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {k} is not a section")
    node[keys[-1]] = value


def parse_overrides(pairs):
    """``["sleep.updates=640", "plan.mode=remind"]`` -> nested dict (values parsed as YAML)."""
    tree = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        _set_path(tree, key.strip(), yaml.safe_load(raw) if raw.strip() else "")
    return tree


def _deep_update(dst, src):
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _deep_update(dst[k], v)
        else:
            dst[k] = v
    return dst


def from_dict(values):
    return _merge(RunConfig(), values or {}, "").validate()


def parse_config(path=None, overrides=()):
    """Load YAML (empty or missing file -> all defaults) and apply flag overrides."""
    tree = {}
    if path:
        with open(path) as fh:
            loaded = yaml.safe_load(fh.read())
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        tree = loaded or {}
    tree = _deep_update(tree, parse_overrides(overrides))
    return from_dict(tree)


def to_dict(cfg):
    return dataclasses.asdict(cfg)


def dump_config(cfg):
    return yaml.safe_dump(to_dict(cfg), sort_keys=True)
