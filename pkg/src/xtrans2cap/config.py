"""Run configuration and its canonical ``section.key = value`` text form."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .cmf import FusionConfig
from .losses import LossFlags, LossWeights
from .transformer import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    name: str = "adam"
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.name != "adam":
            raise ConfigError(f"unsupported optimizer {self.name!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class ScheduleConfig:
    epochs: int = 30
    lr_decay_factor: float = 0.1
    decay_every: int = 10
    ce_warmup_epochs: int = 20  # CIDEr reward starts after this many epochs (variant C)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.decay_every < 1:
            raise ConfigError("decay_every must be >= 1")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    flags: LossFlags = field(default_factory=LossFlags)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    seed: int = 0
    variant_c: bool = False
    offline_teacher: bool = False
    student_toggles: str = ""   # e.g. "-cls,-pe"
    teacher_toggles: str = ""   # e.g. "-f2d"
    cider_k: int = 5
    eval_batch: int = 200

    def lr_at(self, epoch: int) -> float:
        """Learning rate for zero-based ``epoch``."""
        s = self.schedule
        return self.optim.lr * s.lr_decay_factor ** (epoch // s.decay_every)

    @property
    def uses_teacher(self) -> bool:
        return (self.fusion.mode != "off" or self.flags.align or self.flags.ce_teacher
                or self.offline_teacher)

    def to_text(self) -> str:
        return dump_text(self)

    @classmethod
    def from_text(cls, text: str) -> RunConfig:
        return apply_overrides(cls(), parse_text(text))


def flatten(cfg, prefix: str = "") -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if is_dataclass(v):
            out.update(flatten(v, f"{prefix}{f.name}."))
        else:
            out[f"{prefix}{f.name}"] = list(v) if isinstance(v, tuple) else v
    return out


def dump_text(cfg) -> str:
    flat = flatten(cfg)
    return "".join(f"{k} = {json.dumps(flat[k])}\n" for k in sorted(flat))


def _value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        out[key.strip()] = _value(raw)
    return out


def apply_overrides(cfg, overrides: dict):
    """Return a copy of ``cfg`` with dotted-key ``overrides`` applied and validated."""
    data = asdict(cfg)
    known = flatten(cfg)
    for key, val in overrides.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = val
    return _rebuild(type(cfg), data)


def _rebuild(cls, data: dict):
    kwargs = {}
    for f in fields(cls):
        v = data[f.name]
        default = f.default_factory() if callable(f.default_factory) else None  # type: ignore[misc]
        if is_dataclass(default):
            kwargs[f.name] = _rebuild(type(default), v)
        else:
            kwargs[f.name] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig.from_text(Path(path).read_text()) if path else RunConfig()
    return apply_overrides(cfg, overrides or {})


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    k, v = item.split("=", 1)
    return k.strip(), _value(v)


def with_(cfg: RunConfig, **changes) -> RunConfig:
    """``dataclasses.replace`` accepting dotted keys, e.g. ``with_(cfg, **{"fusion.mode": "off"})``."""
    flat = {k: v for k, v in changes.items() if "." in k}
    top = {k: v for k, v in changes.items() if "." not in k}
    try:
        cfg = replace(cfg, **top)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return apply_overrides(cfg, flat)
