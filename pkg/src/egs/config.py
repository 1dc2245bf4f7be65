"""Single JSON configuration document with full defaulting and strict key checking."""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .errors import ConfigError


@dataclass
class ModelConfig:
    group_order: int = 4
    in_channels: int = 3
    widths: list[int] = field(default_factory=lambda: [8, 16, 16])
    kernel_size: int = 3
    downsample: list[int] = field(default_factory=lambda: [2, 2, 2])
    grid: int = 4
    gnn_layers: int = 2
    gnn_hidden: int | None = None
    super_node: bool = True
    readout: str = "super_only"
    standardize: bool = True
    norm_momentum: float = 0.1
    seed: int = 0


@dataclass
class OptimConfig:
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_backbone: float = 0.001
    lr_new: float = 0.01


@dataclass
class AugmentConfig:
    rotate90: bool = True
    hflip: bool = True
    crop_fraction: float = 0.9


@dataclass
class TrainConfig:
    epochs: int = 100
    max_steps: int | None = None
    batch_size: int = 32
    temperature: float = 0.1
    image_side: int = 64
    checkpoint_every: int = 50
    seed: int = 0


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def validate(self) -> "Config":
        m, o, t = self.model, self.optim, self.train
        checks = [
            (m.group_order >= 1, "model.group_order must be >= 1"),
            (m.kernel_size % 2 == 1, "model.kernel_size must be odd"),
            (len(m.widths) == len(m.downsample) and len(m.widths) > 0,
             "model.widths and model.downsample need the same nonzero length"),
            (m.grid >= 1, "model.grid must be >= 1"),
            (m.gnn_layers >= 1, "model.gnn_layers must be >= 1"),
            (m.readout in ("super_only", "concat", "mean"), "model.readout must be super_only, concat or mean"),
            (m.super_node or m.readout == "mean", "model.readout must be 'mean' when super_node is false"),
            (0.0 <= o.momentum < 1.0, "optim.momentum must be in [0, 1)"),
            (o.weight_decay >= 0.0, "optim.weight_decay must be >= 0"),
            (o.lr_backbone >= 0.0 and o.lr_new >= 0.0, "learning rates must be >= 0"),
            (0.0 < self.augment.crop_fraction <= 1.0, "augment.crop_fraction must be in (0, 1]"),
            (t.batch_size >= 1, "train.batch_size must be >= 1"),
            (t.temperature > 0.0, "train.temperature must be positive"),
            (t.epochs >= 0, "train.epochs must be >= 0"),
            (t.checkpoint_every >= 1, "train.checkpoint_every must be >= 1"),
        ]
        side = t.image_side
        reduction = 1
        for f in m.downsample:
            reduction *= f
        checks.append((side % reduction == 0, f"train.image_side {side} not divisible by downsampling {reduction}"))
        checks.append(((side // max(reduction, 1)) % m.grid == 0,
                       f"feature map side {side // max(reduction, 1)} not divisible by model.grid {m.grid}"))
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


def _line_of(text: str | None, key: str) -> str:
    if not text:
        return ""
    for n, line in enumerate(text.splitlines(), 1):
        if re.search(r'"%s"\s*:' % re.escape(key), line):
            return f" (line {n})"
    return ""


def _build(cls, data, path: str, text: str | None):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        key = unknown[0]
        raise ConfigError(f"unknown config key '{path + '.' if path else ''}{key}'{_line_of(text, key)}")
    kwargs = {}
    default = cls()
    for name, value in data.items():
        sub = getattr(default, name)
        if is_dataclass(sub):
            kwargs[name] = _build(type(sub), value, f"{path}.{name}" if path else name, text)
            continue
        if sub is not None and value is not None:
            if isinstance(sub, bool) != isinstance(value, bool) or (
                    isinstance(sub, (int, float)) and not isinstance(value, (int, float))) or (
                    isinstance(sub, (list, str)) and not isinstance(value, type(sub))):
                raise ConfigError(
                    f"config key '{path + '.' if path else ''}{name}' has type {type(value).__name__}, "
                    f"expected {type(sub).__name__}{_line_of(text, name)}")
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict, text: str | None = None) -> Config:
    return _build(Config, data, "", text).validate()


def load_config(path) -> Config:
    """Parse and validate a config file; errors carry the offending line where possible."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return config_from_dict(data, text)


def desk_config() -> Config:
    """Default desk-scale configuration (64 px synthetic data)."""
    return Config().validate()
