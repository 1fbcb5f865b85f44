"""Run configuration: one YAML file drives every pipeline command.

The schema is a nested dataclass tree. Loading rejects unknown keys (typos
should fail loudly, not silently fall back to defaults) and every command
writes the fully resolved config next to its outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .datasets import STAGE1_KINDS, PrepConfig
from .ensemble import VoteConfig
from .expert3d import INPUT_SETTINGS, Expert3DConfig, Stage1TrainConfig
from .expert_ctx import FLAT_AGGREGATES, VARIANTS, ContextConfig, Stage2bTrainConfig
from .expert_slice import SAMPLING_MODES, SliceEncoderConfig, Stage2aTrainConfig

SCHEMA_VERSION = 1


class ConfigError(Exception):
    """Raised for unknown keys, bad values, or schema mismatches."""


@dataclass(frozen=True)
class PathsConfig:
    data_root: str = "data"
    output_root: str = "runs"


@dataclass(frozen=True)
class DataConfig:
    scale: float = 0.1
    excluded_test: int = 1
    corrections: str = ""
    base_inplane: int = 112


@dataclass(frozen=True)
class PrepSettings:
    trim_threshold: int = 150
    trim_fraction: float = 0.15
    lung_components: int = 2
    pool3d: tuple[int, int, int] = (4, 4, 4)
    pool2d: tuple[int, int] = (4, 4)
    stack_source: str = "orig"
    keep_canonical_lung: bool = False

    def to_prep_config(self) -> PrepConfig:
        return PrepConfig(
            trim_threshold=self.trim_threshold, trim_fraction=self.trim_fraction,
            lung_components=self.lung_components, pool3d=self.pool3d,
            pool2d=self.pool2d, stack_source=self.stack_source,
            keep_canonical_lung=self.keep_canonical_lung,
        )


@dataclass(frozen=True)
class Stage1Settings:
    setting: str = "orig_lung"
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-2
    channels: tuple[int, ...] = (8, 16, 32)
    blocks_per_stage: int = 1

    def __post_init__(self):
        if self.setting not in INPUT_SETTINGS:
            raise ValueError(f"setting must be one of {INPUT_SETTINGS}, got {self.setting!r}")

    def to_train_config(self, prep: PrepSettings) -> Stage1TrainConfig:
        model = Expert3DConfig(stem_pool=prep.pool3d, channels=self.channels,
                               blocks_per_stage=self.blocks_per_stage)
        return Stage1TrainConfig(setting=self.setting, epochs=self.epochs,
                                 batch_size=self.batch_size, lr=self.lr, model=model)


@dataclass(frozen=True)
class Stage2aSettings:
    sampling: str = "crs"
    k: int = 12
    epochs: int = 12
    lr: float = 2e-3
    scans_per_batch: int = 4
    channels: tuple[int, ...] = (12, 24, 48)
    embed_dim: int = 32
    pretrain_steps: int = 40
    encoder_fully_trainable: bool = True

    def __post_init__(self):
        if self.sampling not in SAMPLING_MODES:
            raise ValueError(f"sampling must be one of {SAMPLING_MODES}, got {self.sampling!r}")

    def to_train_config(self, prep: PrepSettings) -> Stage2aTrainConfig:
        encoder = SliceEncoderConfig(stem_pool=(1, 1), channels=self.channels,
                                     embed_dim=self.embed_dim)
        return Stage2aTrainConfig(
            sampling=self.sampling, k=self.k, epochs=self.epochs, lr=self.lr,
            scans_per_batch=self.scans_per_batch, encoder=encoder,
            pretrain_steps=self.pretrain_steps,
            encoder_fully_trainable=self.encoder_fully_trainable,
        )


@dataclass(frozen=True)
class Stage2bSettings:
    variants: tuple[str, ...] = ("trans_last2", "flat_cls")
    epochs: int = 10
    lr: float = 1e-3
    scans_per_batch: int = 4
    n_heads: int = 4
    ff_dim: int = 64
    use_positional: bool = True
    flat_aggregate: str = "concat"

    def __post_init__(self):
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(f"unknown variant {v!r}; expected subset of {VARIANTS}")
        if self.flat_aggregate not in FLAT_AGGREGATES:
            raise ValueError(f"flat_aggregate must be one of {FLAT_AGGREGATES}")

    def to_train_config(self) -> Stage2bTrainConfig:
        context = ContextConfig(n_heads=self.n_heads, ff_dim=self.ff_dim,
                                use_positional=self.use_positional,
                                flat_aggregate=self.flat_aggregate)
        return Stage2bTrainConfig(variants=self.variants, epochs=self.epochs,
                                  lr=self.lr, scans_per_batch=self.scans_per_batch,
                                  context=context)


@dataclass(frozen=True)
class Stage3Settings:
    epochs: int = 40
    lr: float = 2e-2
    batch_size: int = 16
    input_kind: str = "orig"

    def __post_init__(self):
        if self.input_kind not in STAGE1_KINDS:
            raise ValueError(f"input_kind must be one of {STAGE1_KINDS}, got {self.input_kind!r}")


@dataclass(frozen=True)
class VoteSettings:
    within_stage_rule: str = "majority_then_mean_prob"
    cross_expert_rule: str = "majority"
    source0_route: bool = True

    def __post_init__(self):
        self.to_vote_config()  # reuse VoteConfig validation at load time

    def to_vote_config(self) -> VoteConfig:
        return VoteConfig(within_stage_rule=self.within_stage_rule,
                          cross_expert_rule=self.cross_expert_rule,
                          source0_route=self.source0_route)


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 1234
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    prep: PrepSettings = field(default_factory=PrepSettings)
    stage1: Stage1Settings = field(default_factory=Stage1Settings)
    stage2a: Stage2aSettings = field(default_factory=Stage2aSettings)
    stage2b: Stage2bSettings = field(default_factory=Stage2bSettings)
    stage3: Stage3Settings = field(default_factory=Stage3Settings)
    vote: VoteSettings = field(default_factory=VoteSettings)


def _build(dc_type, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(dc_type)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; "
                          f"known keys are {sorted(known)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        if dataclasses.is_dataclass(f.type) or (isinstance(f.type, str) and f.type in _SECTIONS):
            section_type = _SECTIONS[f.type] if isinstance(f.type, str) else f.type
            kwargs[name] = _build(section_type, value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return dc_type(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_SECTIONS = {
    "PathsConfig": PathsConfig, "DataConfig": DataConfig,
    "PrepSettings": PrepSettings, "Stage1Settings": Stage1Settings,
    "Stage2aSettings": Stage2aSettings, "Stage2bSettings": Stage2bSettings,
    "Stage3Settings": Stage3Settings, "VoteSettings": VoteSettings,
}


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "config")
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"config schema_version {cfg.schema_version} is not "
                          f"the supported version {SCHEMA_VERSION}")
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    def plain(value):
        if dataclasses.is_dataclass(value):
            return {f.name: plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
        if isinstance(value, tuple):
            return [plain(v) for v in value]
        return value

    return plain(cfg)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text())
    if data is None:
        data = {}
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))


__all__ = [
    "ConfigError", "DataConfig", "PathsConfig", "PrepSettings", "RunConfig",
    "SCHEMA_VERSION", "Stage1Settings", "Stage2aSettings", "Stage2bSettings",
    "Stage3Settings", "VoteSettings", "config_from_dict", "config_to_dict",
    "load_config", "save_config",
]
