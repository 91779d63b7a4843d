"""Run configuration: a strict YAML schema with hard errors on unknown keys.

Every default is either a published training value (guidance scale 7.5,
condition dropout 0.1, lambda_char 0.05, T=1000, DPO beta 5, K=10) or a
documented desk-scale choice (model dims, corpus sizes, learning rates).
See README for the full schema reference.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError


def _from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTION_TYPES.get((cls, name))
        if sub is not None:
            kwargs[name] = _from_dict(sub, value, f"{path}.{name}" if path else name)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


@dataclass
class DataFilterConfig:
    max_text_chars: int = 150
    min_resolution: int = 32  # paper-scale default is 768; desk corpora are smaller
    aspect_ratio_range: tuple = (0.25, 4.0)
    min_aesthetic: float = 4.5


@dataclass
class DataConfig:
    canvas: tuple = (64, 64)
    n_train: int = 2048
    n_test: int = 256
    charset: str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    word_count: tuple = (1, 2)
    word_len: tuple = (2, 5)
    scales: tuple = (2,)
    seed: int = 0
    filter: DataFilterConfig = field(default_factory=DataFilterConfig)


@dataclass
class ModelSection:
    image_size: int = 64
    base_channels: int = 16
    channel_mults: tuple = (1, 2, 3)
    cond_dim: int = 64
    caption_buckets: int = 512
    max_tokens: int = 77
    prompt_enhancement: bool = True
    init_seed: int = 0


@dataclass
class ScheduleSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass
class TrainSection:
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 2e-3
    weight_decay: float = 0.01
    lambda_char: float = 0.05
    cond_dropout: float = 0.1
    char_loss_layers: tuple | None = None  # None = two lowest attention resolutions
    snapshot_every: int = 0  # 0 disables periodic eval-snapshot checkpoints
    seed: int = 0


@dataclass
class SampleSection:
    guidance_scale: float = 7.5
    steps: int = 36


@dataclass
class EvalSection:
    n_images: int = 128
    seed: int = 0
    recognizer_min_score: float = 0.55


@dataclass
class DpoSection:
    K: int = 10
    beta: float = 5.0
    pair_budget: int = 96
    skip_threshold: float | None = None
    learning_rate: float = 1e-5
    steps: int = 300
    batch_pairs: int = 4
    gen_steps: int = 24
    seed: int = 0


@dataclass
class RunSection:
    out_dir: str = "runs/default"
    seed: int = 0


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)
    dpo: DpoSection = field(default_factory=DpoSection)

    def validate(self):
        if self.train.lambda_char > 0 and not self.model.prompt_enhancement:
            raise ConfigError(
                "train.lambda_char > 0 requires model.prompt_enhancement: "
                "the localization loss needs character tokens"
            )
        if not 0.0 <= self.train.cond_dropout <= 1.0:
            raise ConfigError("train.cond_dropout must be within [0, 1]")
        if self.model.image_size != self.data.canvas[0] or self.data.canvas[0] != self.data.canvas[1]:
            raise ConfigError("model.image_size must equal both data.canvas sides")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


_SECTION_TYPES = {
    (RunConfig, "run"): RunSection,
    (RunConfig, "data"): DataConfig,
    (RunConfig, "model"): ModelSection,
    (RunConfig, "schedule"): ScheduleSection,
    (RunConfig, "train"): TrainSection,
    (RunConfig, "sample"): SampleSection,
    (RunConfig, "eval"): EvalSection,
    (RunConfig, "dpo"): DpoSection,
    (DataConfig, "filter"): DataFilterConfig,
}


def config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data or {}, "").validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    return config_from_dict(data)
