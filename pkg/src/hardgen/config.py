"""Run configuration: one strict JSON document drives every pipeline stage.

Unknown keys are rejected with their full path, each command persists the
resolved configuration it ran with, and all stage seeds derive from the
single global seed.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


def _check_keys(data: dict, cls, path: str) -> None:
    allowed = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key: {where}")


@dataclass(frozen=True)
class DatasetConfig:
    num_classes: int = 3
    samples_per_class: int = 500
    test_samples_per_class: int = 100
    image_size: int = 32
    channels: int = 1
    clutter_count: int = 4
    occlusion_fraction: float = 0.6
    noise_std: float = 0.08


@dataclass(frozen=True)
class ScorerConfig:
    epochs: int = 12
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    label_smoothing: float = 0.0
    aug_noise_std: float = 0.03
    width: int = 16
    feature_dim: int = 64
    val_fraction: float = 0.1
    kde_bandwidth: float | None = None


@dataclass(frozen=True)
class ConditioningConfig:
    cond_dim: int = 64
    heads: int = 50
    hidden_sizes: tuple[int, ...] | None = None
    max_len: int = 16


@dataclass(frozen=True)
class StageTrainConfig:
    steps: int = 3000
    batch_size: int = 32
    learning_rate: float = 2e-4
    p_uncond: float = 0.1


@dataclass(frozen=True)
class DiffusionConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    widths: tuple[int, int, int] = (16, 32, 48)
    time_dim: int = 64
    lora_rank: int = 4
    lora_alpha: float = 4.0
    pretrain: StageTrainConfig = field(default_factory=StageTrainConfig)
    finetune: StageTrainConfig = field(default_factory=StageTrainConfig)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 30
    guidance: float = 2.0
    method: str = "ddim"
    eta: float = 0.0


@dataclass(frozen=True)
class SynthesisConfig:
    mu: float = 0.5
    sigma: float = 0.1
    count_per_class: int | None = None  # None: match the real per-class count
    difficulty_only: bool = False


@dataclass(frozen=True)
class ExperimentsConfig:
    distribution_levels: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9)
    distribution_per_level: int = 64
    dilemma_thresholds: tuple[float, float] = (0.1, 0.5)
    dilemma_budget_fraction: float = 0.25
    dilemma_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    dilemma_real_per_class: int = 100
    dilemma_pool_mus: tuple[float, ...] = (0.05, 0.3, 0.7)
    dilemma_pool_sigma: float = 0.1
    dilemma_pool_per_class: int = 50  # per stratum
    ablation_mu_list: tuple[float, ...] = (0.3, 0.5, 0.7, 0.9)
    ablation_sigma_list: tuple[float, ...] = (0.01, 0.1, 0.5)
    ablation_sigma_fixed: float = 0.1
    ablation_mu_fixed: float = 0.5
    ablation_per_class: int = 20
    ablation_real_per_class: int = 100
    hard_factor_class: int = 0
    hard_factor_levels: tuple[float, ...] = (0.1, 0.5, 0.9)
    hard_factor_samples: int = 8
    projection_images: int = 200


_SECTIONS = {
    "dataset": DatasetConfig,
    "scorer": ScorerConfig,
    "conditioning": ConditioningConfig,
    "diffusion": DiffusionConfig,
    "sampler": SamplerConfig,
    "synthesis": SynthesisConfig,
    "experiments": ExperimentsConfig,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    conditioning: ConditioningConfig = field(default_factory=ConditioningConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    experiments: ExperimentsConfig = field(default_factory=ExperimentsConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"config root must be an object, got {type(data).__name__}")
        allowed = {"seed"} | set(_SECTIONS)
        for key in data:
            if key not in allowed:
                raise ConfigError(f"unknown config key: {key}")
        kwargs: dict = {"seed": _coerce_scalar(data.get("seed", 0), int, "seed")}
        for name, section_cls in _SECTIONS.items():
            section_data = data.get(name, {})
            if not isinstance(section_data, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            kwargs[name] = _build_section(section_cls, section_data, name)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return _as_plain(dataclasses.asdict(self))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


def _coerce_scalar(value, kind, path: str):
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return int(value)
    if kind is bool and isinstance(value, bool):
        return value
    if kind is str and isinstance(value, str):
        return value
    raise ConfigError(f"config key {path}: expected {kind.__name__}, got {value!r}")


def _build_section(section_cls, data: dict, path: str):
    _check_keys(data, section_cls, path)
    defaults = section_cls()
    kwargs = {}
    for f in dataclasses.fields(section_cls):
        if f.name not in data:
            continue
        value = data[f.name]
        where = f"{path}.{f.name}"
        default = getattr(defaults, f.name)
        annotation = str(f.type)
        if dataclasses.is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}: expected an object")
            kwargs[f.name] = _build_section(type(default), value, where)
        elif isinstance(default, tuple) or (default is None and "tuple" in annotation):
            if value is None and "None" in annotation:
                kwargs[f.name] = None
            elif isinstance(value, (list, tuple)):
                kwargs[f.name] = tuple(value)
            else:
                raise ConfigError(f"config key {where}: expected a list")
        elif value is None and "None" in annotation:
            kwargs[f.name] = None
        elif isinstance(default, bool):
            kwargs[f.name] = _coerce_scalar(value, bool, where)
        elif isinstance(default, int):
            kwargs[f.name] = _coerce_scalar(value, int, where)
        elif isinstance(default, float) or (default is None and "float" in annotation):
            kwargs[f.name] = _coerce_scalar(value, float, where)
        elif isinstance(default, str):
            kwargs[f.name] = _coerce_scalar(value, str, where)
        elif default is None and "int" in annotation:
            kwargs[f.name] = _coerce_scalar(value, int, where)
        else:
            kwargs[f.name] = value
    return section_cls(**kwargs)


def _as_plain(value):
    if isinstance(value, dict):
        return {k: _as_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_as_plain(v) for v in value]
    return value
