"""Experiment configuration: strict JSON schema, defaults, canonical hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from .objective import LossConfig

SEED_ENV_VAR = "VASCL_SEED"

# Perturbation radius per backbone size.
DELTA_PRESETS = {"distil": 15.0, "base": 15.0, "large": 30.0}

MODES = ("vascl", "dropout-only")
EVAL_TASKS = ("purity", "spearman", "clustering", "probe", "triples")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "mixture"  # "mixture" | "file"
    path: Optional[str] = None
    components: int = 4
    dim: int = 20
    n: int = 2000
    std: float = 1.0
    separation: float = 3.0
    offset: float = 0.0
    val_fraction: float = 0.2
    pairs: int = 1000
    triples: int = 1000

    def validate(self):
        if self.source not in ("mixture", "file"):
            raise ConfigError(f"data.source must be 'mixture' or 'file', got {self.source!r}")
        if self.source == "file" and not self.path:
            raise ConfigError("data.path is required when data.source is 'file'")
        if self.source == "mixture":
            if self.components < 1 or self.dim < 1 or self.n < 2:
                raise ConfigError("mixture needs components >= 1, dim >= 1, n >= 2")
            if self.std < 0 or self.separation < 0:
                raise ConfigError("mixture std and separation must be non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("data.val_fraction must be in [0, 1)")
        if self.pairs < 0 or self.triples < 0:
            raise ConfigError("data.pairs and data.triples must be non-negative")


@dataclass
class ModelConfig:
    encoder_dims: List[int] = field(default_factory=lambda: [64, 64])
    activation: str = "tanh"
    output_activation: str = "linear"
    dropout: float = 0.1
    head_dim: int = 128
    head_activation: str = "relu"

    def validate(self):
        if any(int(w) != w or w < 1 for w in self.encoder_dims):
            raise ConfigError("model.encoder_dims must be positive integers")
        for name in ("activation", "output_activation", "head_activation"):
            if getattr(self, name) not in ("tanh", "relu", "linear"):
                raise ConfigError(f"model.{name} must be tanh, relu or linear")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.dropout must be in [0, 1)")
        if self.head_dim < 1:
            raise ConfigError("model.head_dim must be >= 1")


@dataclass
class LossSection:
    temperature: float = 0.05
    k: int = 16
    delta: Union[float, str] = "base"
    inner_steps: int = 1
    init_std: float = 1.0
    stop_gradient_through_delta: bool = True

    @property
    def radius(self) -> float:
        if isinstance(self.delta, str):
            return DELTA_PRESETS[self.delta]
        return float(self.delta)

    def validate(self):
        if isinstance(self.delta, str) and self.delta not in DELTA_PRESETS:
            raise ConfigError(f"loss.delta preset must be one of {sorted(DELTA_PRESETS)}, got {self.delta!r}")
        try:
            self.to_loss_config()
        except ValueError as exc:
            raise ConfigError(f"loss: {exc}") from exc

    def to_loss_config(self) -> LossConfig:
        return LossConfig(
            temperature=self.temperature,
            k=self.k,
            delta=self.radius,
            inner_steps=self.inner_steps,
            init_std=self.init_std,
            stop_gradient_through_delta=self.stop_gradient_through_delta,
        )


@dataclass
class OptimizerConfig:
    lr_head: float = 5e-4
    lr_encoder: float = 5e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.lr_head <= 0 or self.lr_encoder < 0:
            raise ConfigError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("invalid Adam hyperparameters")


@dataclass
class ScheduleConfig:
    epochs: int = 5
    batch_size: int = 128
    eval_every: int = 500
    max_steps: Optional[int] = None
    drop_last: bool = True

    def validate(self):
        if self.epochs < 1 or self.batch_size < 2 or self.eval_every < 1:
            raise ConfigError("schedule needs epochs >= 1, batch_size >= 2, eval_every >= 1")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("schedule.max_steps must be >= 0")


@dataclass
class EvalConfig:
    tasks: List[str] = field(default_factory=lambda: ["purity", "spearman", "clustering", "triples"])
    purity_k: List[int] = field(default_factory=lambda: [1, 5, 10, 20])
    select_metric: str = "purity@10"
    clustering_runs: int = 10
    probe_shots: int = 8
    probe_splits: int = 5

    def validate(self):
        bad = set(self.tasks) - set(EVAL_TASKS)
        if bad:
            raise ConfigError(f"unknown eval tasks {sorted(bad)}")
        if not self.purity_k or min(self.purity_k) < 1:
            raise ConfigError("eval.purity_k must be non-empty positive integers")
        if not (self.select_metric.startswith("purity@") or self.select_metric == "spearman"):
            raise ConfigError("eval.select_metric must be 'purity@<K>' or 'spearman'")


@dataclass
class ExperimentConfig:
    seed: int = 0
    mode: str = "vascl"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossSection = field(default_factory=LossSection)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if int(self.seed) != self.seed:
            raise ConfigError("seed must be an integer")
        for section in (self.data, self.model, self.loss, self.optimizer, self.schedule, self.eval):
            section.validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "loss": LossSection,
    "optimizer": OptimizerConfig,
    "schedule": ScheduleConfig,
    "eval": EvalConfig,
}


def _strict(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in raw.items():
        if cls is ExperimentConfig and key in _SECTIONS:
            value = _strict(_SECTIONS[key], value, key)
        elif isinstance(value, bool) and known[key].type not in ("bool", "Optional[bool]"):
            raise ConfigError(f"{where}.{key}: unexpected boolean")
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(raw: Dict[str, Any]) -> ExperimentConfig:
    raw = dict(raw)
    if "seed" not in raw and os.environ.get(SEED_ENV_VAR):
        try:
            raw["seed"] = int(os.environ[SEED_ENV_VAR])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer") from exc
    try:
        return _strict(ExperimentConfig, raw, "config").validate()
    except TypeError as exc:
        raise ConfigError(f"config: wrong value type ({exc})") from exc


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)
