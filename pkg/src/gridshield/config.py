"""Pipeline configuration: YAML file -> validated dataclasses -> resolved YAML."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .attacks import ATTACK_KINDS, AttackConfig
from .compress import CompressConfig, PruneConfig
from .data import ACCESS_LEVELS
from .errors import ConfigError
from .model import TrainConfig


@dataclass
class DatasetSection:
    sites: int = 20
    days: int = 365
    width: int = 48
    stride: int = 48
    malicious_ratio: float = 0.5
    fractions: list[float] = field(default_factory=lambda: [0.7, 0.15, 0.15])
    csv_path: str | None = None
    interval: int = 30
    noise: float = 0.05
    weekly: float = 0.15


@dataclass
class TrainSection:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    patience: int = 10


@dataclass
class NasSection:
    budget: int = 20
    n: int = 3
    C: float = 0.9
    F: float = 0.9
    epochs: int = 10
    candidates: int = 500
    n_init: int = 4


@dataclass
class CompressSection:
    sparsity: float = 0.45
    per_round: float = 0.1
    prune_finetune_epochs: int = 1
    finetune_epochs: int = 2
    bits: int = 8
    weights: list[float] = field(default_factory=lambda: [1 / 3, 1 / 3, 1 / 3])
    sample_size: int = 512
    energy: float = 0.95


@dataclass
class AttackSection:
    kinds: list[str] = field(default_factory=lambda: list(ATTACK_KINDS))
    epsilon: float = 0.2
    alpha: float = 0.05
    iterations: int = 10
    p_levels: list[int] = field(default_factory=lambda: list(ACCESS_LEVELS))
    n_samples: int = 512
    search_steps: int = 5
    cw_steps: int = 50
    cw_lr: float = 0.01
    cw_box: float | None = 0.2
    gan_epochs: int = 20


@dataclass
class BenchSection:
    reps: int = 30
    warmup: int = 5
    batch: int = 64


@dataclass
class PipelineConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainSection = field(default_factory=TrainSection)
    nas: NasSection = field(default_factory=NasSection)
    compress: CompressSection = field(default_factory=CompressSection)
    attack: AttackSection = field(default_factory=AttackSection)
    bench: BenchSection = field(default_factory=BenchSection)
    seed: int = 0
    output_dir: str = "runs/default"
    parallel: int = 1

    # ---- derived stage configs

    def train_config(self, seed_offset: int = 0) -> TrainConfig:
        t = self.train
        return TrainConfig(t.epochs, t.batch_size, t.lr, t.patience, self.seed + seed_offset)

    def nas_train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train_config(), epochs=self.nas.epochs)

    def compress_config(self) -> CompressConfig:
        c = self.compress
        prune = PruneConfig(c.sparsity, c.per_round, c.prune_finetune_epochs, c.sample_size, self.seed)
        return CompressConfig(prune, c.finetune_epochs, tuple(c.weights), self.train_config(), c.energy)

    def attack_configs(self) -> list[AttackConfig]:
        a = self.attack
        return [AttackConfig(kind=k, epsilon=a.epsilon, alpha=a.alpha, iterations=a.iterations,
                             search_steps=a.search_steps, cw_steps=a.cw_steps, cw_lr=a.cw_lr, cw_box=a.cw_box,
                             n_samples=a.n_samples, gan_epochs=a.gan_epochs, seed=self.seed) for k in a.kinds]

    # ---- serialisation

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def section_hash(self, *names: str) -> str:
        d = self.to_dict()
        payload = {n: d[n] for n in names}
        payload["seed"] = self.seed
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def _build(cls, data: Any, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            raise ConfigError(f"unknown config key {where + '.' if where else ''}{key}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, path)
        else:
            kwargs[name] = _coerce(value, default, path)
    return cls(**kwargs)


def _coerce(value, default, path):
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or (default is None and isinstance(value, (int, float))):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return list(value)
    if isinstance(default, str) or default is None:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def validate(cfg: PipelineConfig) -> PipelineConfig:
    d, a = cfg.dataset, cfg.attack
    checks = [
        (d.sites >= 1 and d.days >= 1, "dataset.sites and dataset.days must be >= 1"),
        (d.width >= 4 and d.stride >= 1, "dataset.width must be >= 4 and dataset.stride >= 1"),
        (0 <= d.malicious_ratio <= 1, "dataset.malicious_ratio must lie in [0, 1]"),
        (len(d.fractions) == 3 and abs(sum(d.fractions) - 1) < 1e-9, "dataset.fractions must be three shares summing to 1"),
        (cfg.nas.budget >= cfg.nas.n >= 1, "nas.budget must be >= nas.n >= 1"),
        (0 <= cfg.nas.C <= 1 and 0 <= cfg.nas.F <= 1, "nas.C and nas.F must lie in [0, 1]"),
        (cfg.compress.bits == 8, "compress.bits: only 8 is supported"),
        (len(cfg.compress.weights) == 3 and abs(sum(cfg.compress.weights) - 1) < 1e-9
         and min(cfg.compress.weights) >= 0, "compress.weights must be three non-negative numbers summing to 1"),
        (all(k in ATTACK_KINDS for k in a.kinds), f"attack.kinds must be drawn from {list(ATTACK_KINDS)}"),
        (all(p in ACCESS_LEVELS for p in a.p_levels), f"attack.p_levels must be drawn from {list(ACCESS_LEVELS)}"),
        (cfg.bench.reps >= 10, "bench.reps must be >= 10"),
        (cfg.parallel >= 1, "parallel must be >= 1"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    try:
        cfg.train_config()
        cfg.compress_config()
        cfg.attack_configs()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str | Path | None = None, **overrides) -> PipelineConfig:
    """Read YAML (or defaults when ``path`` is None), apply non-None overrides, validate."""
    data: dict = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    cfg = _build(PipelineConfig, data, "")
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    return validate(cfg)
