"""Run configuration: dataclass tree, named presets, and plain-text key=value
config files with dotted keys (e.g. `model.dim = 64`).

Preset `toy` is the desk-scale CPU setup. Preset `paper-51-2` carries the
published hyperparameters (rank 128, n=8 experts with top-2 routing,
beta=0.01, 50-step DDIM at CFG 6.0, lr 1e-4, 2000/3000 stage steps); it is a
named record of those values, not a configuration sized to run on a desk.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace

from .diffusion import SamplerConfig
from .model import ModelConfig, MoEConfig
from .synthvfx import SynthConfig
from .trainer import TrainConfig


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    schedule_steps: int = 1000
    seed: int = 0


def preset(name: str) -> RunConfig:
    if name == "toy":
        return RunConfig(
            model=ModelConfig(moe=MoEConfig(n_experts=4, top_k=1, rank=4, alpha=4.0)),
            train=TrainConfig(stage1_steps=600, stage2_steps=900),
            sampler=SamplerConfig(steps=50, cfg_scale=6.0),
        )
    if name == "paper-51-2":
        return RunConfig(
            model=ModelConfig(moe=MoEConfig(n_experts=8, top_k=2, rank=128, alpha=128.0)),
            train=TrainConfig(stage1_steps=2000, stage2_steps=3000, lr=1e-4, beta=0.01),
            sampler=SamplerConfig(steps=50, cfg_scale=6.0),
        )
    if name == "four-experts-top1":
        cfg = preset("paper-51-2")
        cfg.model.moe = MoEConfig(n_experts=4, top_k=1, rank=128, alpha=128.0)
        return cfg
    if name == "paper-appendix-c3":
        cfg = preset("toy")
        cfg.train = replace(cfg.train, stage1_steps=2000, stage2_steps=3000)
        return cfg
    raise ValueError(f"unknown preset {name!r}")


PRESET_NAMES = ("toy", "paper-51-2", "four-experts-top1", "paper-appendix-c3")


class ConfigError(ValueError):
    pass


def _coerce(raw: str, current, key: str, lineno: int):
    raw = raw.strip()
    target_type = type(current)
    try:
        if target_type is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if target_type is tuple:
            elem_type = type(current[0]) if current else str
            return tuple(elem_type(part.strip()) for part in raw.split(","))
        return target_type(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse {raw!r} as {target_type.__name__} for key {key!r}") from None


def _set_dotted(cfg: RunConfig, key: str, raw: str, lineno: int) -> None:
    parts = key.split(".")
    obj = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or part not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"line {lineno}: unknown config section {part!r} in key {key!r}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj) or leaf not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"line {lineno}: unknown config key {key!r}")
    current = getattr(obj, leaf)
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"line {lineno}: key {key!r} names a section, not a value")
    setattr(obj, leaf, _coerce(raw, current, key, lineno))


def apply_config_text(cfg: RunConfig, text: str, source: str = "<config>") -> RunConfig:
    """Overlay `key = value` lines onto a config; '#' starts a comment."""
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value', got {line.rstrip()!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}: line {lineno}: empty key")
        try:
            _set_dotted(cfg, key, raw, lineno)
        except ConfigError as e:
            raise ConfigError(f"{source}: {e}") from None
    return cfg


def load_config_file(cfg: RunConfig, path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return apply_config_text(cfg, fh.read(), source=path)


def config_snapshot(cfg: RunConfig) -> dict:
    """Nested plain-dict view, suitable for JSON serialization."""
    return dataclasses.asdict(cfg)


def model_config_from_snapshot(snap: dict) -> ModelConfig:
    model = dict(snap["model"])
    model["moe"] = MoEConfig(**model["moe"])
    return ModelConfig(**model)
