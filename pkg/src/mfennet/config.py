"""Flat ``key=value`` run configuration with ``model.`` / ``train.`` / ``data.`` sections.

Example file::

    # comments and blank lines are ignored
    model.kind = mfennet
    model.blocks_per_stage = 1,4,2,2,0
    train.epochs = 3
    data.dir = synth
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from typing import Optional

from .data import AugmentConfig
from .model import ModelConfig
from .train_eval import TrainConfig


class ConfigKeyError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


@dataclass(frozen=True)
class DataConfig:
    dir: str = "synth"
    size: int = 256
    train_frac: float = 0.8
    split_seed: int = 0
    synth_n: int = 16
    synth_seed: int = 7
    flip_p: float = 0.5
    vertical_flip: bool = False
    crop_frac: float = 0.875

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.flip_p, self.vertical_flip, self.crop_frac)


@dataclass
class RunConfig:
    kind: str = "mfennet"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out: str = "runs/latest"


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ValueError(f"bad value {raw!r} for config key {key!r}") from exc
    if default is None:
        return raw or None
    return raw


def _section_fields(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def parse_lines(text: str) -> list:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def apply(cfg: RunConfig, pairs) -> RunConfig:
    """Apply dotted ``section.key`` overrides; unknown keys raise ConfigKeyError."""
    model = _section_fields(cfg.model)
    train = _section_fields(cfg.train)
    data = _section_fields(cfg.data)
    kind, out = cfg.kind, cfg.out
    for key, raw in pairs:
        section, _, name = key.partition(".")
        if key == "model.kind":
            kind = raw
        elif key == "out":
            out = raw
        elif section == "model" and name in model:
            model[name] = _coerce(raw, model[name], key)
        elif section == "train" and name in train:
            train[name] = _coerce(raw, train[name], key)
        elif section == "data" and name in data:
            data[name] = _coerce(raw, data[name], key)
        else:
            raise ConfigKeyError(f"unknown config key {key!r}")
    return RunConfig(kind, ModelConfig(**model), TrainConfig(**train), DataConfig(**data), out)


def default_config() -> RunConfig:
    cfg = RunConfig()
    env_seed = os.environ.get("MFEN_SEED")
    if env_seed:
        cfg.train = replace(cfg.train, seed=int(env_seed))
    return cfg


def load(path: Optional[str] = None, overrides=()) -> RunConfig:
    cfg = default_config()
    if path:
        with open(path) as fh:
            cfg = apply(cfg, parse_lines(fh.read()))
    return apply(cfg, overrides)


def dump(cfg: RunConfig) -> str:
    lines = [f"model.kind={cfg.kind}"]
    lines += [f"model.{k}={format_value(v)}" for k, v in _section_fields(cfg.model).items()]
    lines += [f"train.{k}={format_value(v)}" for k, v in _section_fields(cfg.train).items()]
    lines += [f"data.{k}={format_value(v)}" for k, v in _section_fields(cfg.data).items()]
    lines.append(f"out={cfg.out}")
    return "\n".join(lines) + "\n"


def parse_model_section(text: str) -> tuple:
    """Inverse of the checkpoint config block: (kind, ModelConfig)."""
    values = _section_fields(ModelConfig())
    kind = "mfennet"
    for key, raw in parse_lines(text):
        if key == "kind":
            kind = raw
        elif key in values:
            values[key] = _coerce(raw, values[key], key)
        else:
            raise ConfigKeyError(f"unknown model config key {key!r} in checkpoint")
    return kind, ModelConfig(**values)
