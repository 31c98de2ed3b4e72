"""Run configuration: nested dataclasses loaded from JSON, validated before any compute."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import config_hash
from .diffusion import NoiseSchedule, SamplerConfig
from .training import BaseConfig, CatiConfig, DpsConfig
from .unet import UNetConfig


class ConfigError(ValueError):
    pass


@dataclass
class LoraSection:
    rank: int = 4
    scale: float = 1.0
    dropout: float = 0.1
    selector: str = "*.attn2.to_v"


@dataclass
class ControlSection:
    tau: float = 0.3
    end_fraction: float = 0.7
    memory_saving: bool = False

    def __post_init__(self):
        if not 0.0 <= self.end_fraction <= 1.0:
            raise ConfigError("control.end_fraction must lie in [0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("control.tau must lie in [0, 1]")


@dataclass
class InversionSection:
    refine: int = 8
    tol: float = 1e-6

    def __post_init__(self):
        if self.refine < 0:
            raise ConfigError("inversion.refine must be >= 0")
        if self.tol < 0:
            raise ConfigError("inversion.tol must be >= 0")


@dataclass
class DataSection:
    pair_seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    concept_pairs: list = field(default_factory=lambda: [0])
    frames: int = 6
    concept_frames: int = 8
    concept_token: str = "$sks"
    initializer: str = "disc"
    prefix: str = "a video of"
    demo_pair: int = 0

    def __post_init__(self):
        if not self.pair_seeds:
            raise ConfigError("data.pair_seeds must not be empty")
        if not set(self.concept_pairs) <= set(self.pair_seeds):
            raise ConfigError("data.concept_pairs must be a subset of data.pair_seeds")
        if self.demo_pair not in self.pair_seeds:
            raise ConfigError("data.demo_pair must be one of data.pair_seeds")
        if not self.concept_token.startswith("$"):
            raise ConfigError("data.concept_token must start with '$'")
        if self.frames < 1 or self.concept_frames < 1:
            raise ConfigError("frame counts must be positive")


SECTIONS = {
    "unet": UNetConfig,
    "lora": LoraSection,
    "schedule": NoiseSchedule,
    "sampler": SamplerConfig,
    "base": BaseConfig,
    "cati": CatiConfig,
    "dps": DpsConfig,
    "control": ControlSection,
    "inversion": InversionSection,
    "data": DataSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    corpus: str = "corpus"
    out: str = "runs/default"
    unet: UNetConfig = field(default_factory=UNetConfig)
    lora: LoraSection = field(default_factory=LoraSection)
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(guidance=1.0))
    base: BaseConfig = field(default_factory=BaseConfig)
    cati: CatiConfig = field(default_factory=CatiConfig)
    dps: DpsConfig = field(default_factory=DpsConfig)
    control: ControlSection = field(default_factory=ControlSection)
    inversion: InversionSection = field(default_factory=InversionSection)
    data: DataSection = field(default_factory=DataSection)

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "corpus": self.corpus, "out": self.out}
        for name in SECTIONS:
            section = getattr(self, name)
            out[name] = {f.name: getattr(section, f.name) for f in dataclasses.fields(section)}
        return json.loads(json.dumps(out))

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def seeded(self, seed: int) -> "RunConfig":
        """Copy with ``seed`` applied to every seeded section."""
        d = self.to_dict()
        d["seed"] = seed
        for name in ("unet", "base", "cati", "dps"):
            d[name]["seed"] = seed
        return from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, (tuple, list)):
        if not isinstance(value, (list, tuple)) or (default and len(value) != len(default) and isinstance(default, tuple)):
            raise ConfigError(f"{where}: expected a list like {list(default)!r}, got {value!r}")
        return type(default)(value)
    if default is None:
        return value
    raise ConfigError(f"{where}: unsupported value {value!r}")


def _section(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {k: _coerce(v, getattr(defaults, k), f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    allowed = {"seed", "corpus", "out", *SECTIONS}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys {unknown}")
    base = RunConfig()
    kwargs = {}
    for key in ("seed", "corpus", "out"):
        if key in data:
            kwargs[key] = _coerce(data[key], getattr(base, key), key)
    for name, cls in SECTIONS.items():
        if name in data:
            kwargs[name] = _section(cls, data[name], name)
    cfg = RunConfig(**kwargs)
    if cfg.schedule.train_steps % cfg.sampler.steps:
        raise ConfigError("sampler.steps must divide schedule.train_steps")
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)


def as_json(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2)

