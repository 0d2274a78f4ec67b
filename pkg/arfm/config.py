"""
Run configuration: a TOML file with one table per section, read into
dataclasses, plus dotted command-line overrides.
"""
from __future__ import annotations

import dataclasses
import logging
import typing
from dataclasses import dataclass
from pathlib import Path

import tomli
import tomli_w

from arfm.evaluation import EvalFilterSpec
from arfm.flow import FlowConfig
from arfm.fusion import FusionConfig
from arfm.model import OBJECTIVES
from arfm.model import ModelConfig
from arfm.query import QueryConfig
from arfm.track_encoder import EncoderConfig
from arfm.world import InvalidWorldSpec
from arfm.world import WorldSpec

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    objective: str = "flow"
    steps: int = 2000
    batch_size: int = 16
    lr: float = 5e-5
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0
    ema_decay: float = 0.9999
    ema_interval: int = 100
    ema_warmup: bool = True
    num_points: int = 32
    window: int = 51
    temperature: tuple = (0.5, 50.0)
    min_visibility: float = 0.5
    seed: int = 0
    log_every: int = 50
    threads: int = 1
    progress: bool = True


@dataclass
class SamplingConfig:
    sample_steps: int = 16
    horizon: int = 16
    edit_t: float = 0.8
    edit_steps: int = 4
    num_samples: int = 5
    seed: int = 0


@dataclass
class EvalConfig:
    candidates: int = 1000
    top_k: int = 100
    movement_threshold: float = 50.0
    conditioning_frames: int = 1
    horizon: int = 50
    num_samples: int = 5
    baselines: tuple = ("no_movement", "const_velocity", "ar_ls")
    ar_order: int = 4

    def filter_spec(self) -> EvalFilterSpec:
        return EvalFilterSpec(candidates=self.candidates, top_k=self.top_k,
                              movement_threshold=self.movement_threshold)


@dataclass
class DataConfig:
    train_episodes: int = 500
    eval_episodes: int = 200
    train_seed: int = 0
    eval_seed: int = 1_000_000


@dataclass
class PathsConfig:
    workdir: str = "runs/default"


SECTIONS = {
    "world": WorldSpec,
    "fusion": FusionConfig,
    "flow": FlowConfig,
    "encoder": EncoderConfig,
    "query": QueryConfig,
    "train": TrainConfig,
    "sampling": SamplingConfig,
    "eval": EvalConfig,
    "data": DataConfig,
    "paths": PathsConfig,
}


@dataclass
class RunConfig:
    world: WorldSpec = dataclasses.field(default_factory=WorldSpec)
    fusion: FusionConfig = dataclasses.field(default_factory=FusionConfig)
    flow: FlowConfig = dataclasses.field(default_factory=FlowConfig)
    encoder: EncoderConfig = dataclasses.field(default_factory=EncoderConfig)
    query: QueryConfig = dataclasses.field(default_factory=QueryConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    sampling: SamplingConfig = dataclasses.field(default_factory=SamplingConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    paths: PathsConfig = dataclasses.field(default_factory=PathsConfig)

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        try:
            config = cls(**{name: _build_section(name, SECTIONS[name], values) for name, values in data.items()})
            config.world.validate()
        except (AssertionError, InvalidWorldSpec, TypeError) as error:
            raise ConfigError(f"invalid config: {error}")
        if config.train.objective not in OBJECTIVES:
            raise ConfigError(f"train.objective must be one of {OBJECTIVES}, got {config.train.objective!r}")
        return config

    def to_dict(self) -> dict:
        return {name: _section_dict(getattr(self, name)) for name in SECTIONS}

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def model_config(self, objective: typing.Optional[str] = None) -> ModelConfig:
        """ Model config with the predictor feature width tied to the fusion width. """
        fusion = dataclasses.replace(self.fusion, canvas=self.world.canvas,
                                     reference_frame_rate=self.world.reference_frame_rate)
        flow = dataclasses.replace(self.flow, feature_width=fusion.width)
        return ModelConfig(fusion=fusion, flow=flow, objective=objective or self.train.objective)


def _build_section(name: str, cls: type, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"section [{name}] must be a table")
    fields = {field.name: field for field in dataclasses.fields(cls)}
    unknown = set(values) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
    return cls(**{key: tuple(value) if isinstance(value, list) else value for key, value in values.items()})


def _section_dict(section) -> dict:
    data = {}
    for key, value in dataclasses.asdict(section).items():
        if value is None:
            continue
        data[key] = list(value) if isinstance(value, tuple) else value
    return data


def parse_value(text: str):
    """ TOML literal, or the bare string when `text` is not one. """
    try:
        return tomli.loads(f"value = {text}")["value"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(data: dict, overrides: typing.Iterable[str]) -> dict:
    """
    Apply `section.key=value` overrides to a raw config dict.
    """
    for override in overrides:
        path, separator, text = override.partition("=")
        section, dot, key = path.strip().partition(".")
        if not separator or not dot or not key:
            raise ConfigError(f"override must look like section.key=value, got {override!r}")
        data.setdefault(section, {})[key] = parse_value(text.strip())
    return data


def load_config(path: typing.Optional[typing.Union[str, Path]] = None,
                overrides: typing.Iterable[str] = ()) -> RunConfig:
    overrides = list(overrides)
    data = {}
    if path is not None:
        try:
            with open(path, "rb") as file:
                data = tomli.load(file)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found")
        except tomli.TOMLDecodeError as error:
            raise ConfigError(f"config file {path} is not valid TOML: {error}")
    config = RunConfig.from_dict(apply_overrides(data, overrides))
    logger.debug("Loaded config from %s with %d override(s)", path or "defaults", len(overrides))
    return config
