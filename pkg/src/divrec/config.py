"""Run configuration: one flat YAML mapping, CLI overrides on top.

Precedence is flags > file > defaults. Unknown keys are rejected and every
value is validated before any stage runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import zlib

import numpy as np
import yaml

from .mf import LEARNING_RATE_GRID, REGULARIZATION_GRID

VARIANTS = ("ml100k", "ml1m")
DATA_ENV = {"ml100k": "DIVREC_ML100K", "ml1m": "DIVREC_ML1M"}
DEFAULT_DATA_DIR = {"ml100k": "data/ml-100k", "ml1m": "data/ml-1m"}
BETA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class RunConfig:
    dataset: str = "ml100k"
    data_dir: str | None = None  # falls back to $DIVREC_ML100K / $DIVREC_ML1M, then data/<name>
    out: str = "runs/default"
    seed: int = 0

    # preprocessing
    split_fraction: float = 0.8
    min_train_positives: int = 10
    drop_cold_test_items: bool = True

    # factor models
    d: int = 30
    mf_learning_rate: float = 2.0 ** -3
    mf_regularization: float = 1e-2
    mf_epochs: int = 30
    mf_batch_size: int = 128
    lmf_bias: bool = True

    # agent
    ell: int = 5
    gamma: float = 0.95
    tau: float = 0.01
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    batch_size: int = 64
    buffer_capacity: int = 100_000
    sigma0: float = 0.2
    sigma_decay: float = 0.9995
    sigma_floor: float = 0.02
    pretrain_epochs: int = 3
    critic_warmup_episodes: int = 20
    train_episodes: int = 100
    train_horizon: int = 50

    # evaluation
    k: int = 5
    beta: float = 0.5
    beta_grid: tuple = BETA_GRID
    rho: float = 0.5
    offline_epochs: int = 50
    online_epochs: int = 50
    online_users: int = 100
    similarity: str = "cosine"
    history_init: str = "empty"
    schedule: str = "round_robin"

    def __post_init__(self):
        errors = []

        def check(ok, msg):
            if not ok:
                errors.append(msg)

        check(self.dataset in VARIANTS, f"dataset must be one of {VARIANTS}")
        check(0 <= self.seed < 2 ** 64, "seed must be an unsigned 64-bit integer")
        check(0.0 < self.split_fraction < 1.0, "split_fraction must lie in (0, 1)")
        check(self.min_train_positives >= 1, "min_train_positives must be >= 1")
        check(self.d >= 1, "d must be positive")
        check(self.mf_learning_rate in LEARNING_RATE_GRID,
              f"mf_learning_rate must be one of {LEARNING_RATE_GRID}")
        check(self.mf_regularization in REGULARIZATION_GRID,
              f"mf_regularization must be one of {REGULARIZATION_GRID}")
        check(self.ell >= 2, "ell must be >= 2")
        check(0.0 <= self.gamma <= 1.0, "gamma must lie in [0, 1]")
        check(0.0 < self.tau <= 1.0, "tau must lie in (0, 1]")
        check(self.actor_lr > 0 and self.critic_lr > 0, "learning rates must be positive")
        check(1 <= self.batch_size <= self.buffer_capacity, "need 1 <= batch_size <= buffer_capacity")
        check(self.sigma0 >= 0 and 0 < self.sigma_decay <= 1 and self.sigma_floor >= 0,
              "invalid exploration noise schedule")
        for name in ("mf_epochs", "mf_batch_size", "pretrain_epochs", "critic_warmup_episodes",
                     "train_episodes", "train_horizon", "offline_epochs", "online_epochs",
                     "online_users"):
            check(getattr(self, name) >= (1 if name in ("mf_batch_size", "online_users") else 0),
                  f"{name} out of range")
        check(self.k >= 2, "k must be >= 2")
        check(0.0 < self.beta < 1.0, "beta must lie in (0, 1)")
        check(len(self.beta_grid) > 0 and all(0.0 < b < 1.0 for b in self.beta_grid),
              "beta_grid values must lie in (0, 1)")
        check(0.0 <= self.rho <= 1.0, "rho must lie in [0, 1]")
        check(self.similarity in ("cosine", "jaccard"), "similarity must be cosine or jaccard")
        check(self.history_init in ("empty", "train"), "history_init must be empty or train")
        check(self.schedule in ("round_robin", "sequential"),
              "schedule must be round_robin or sequential")
        if errors:
            raise ConfigError("; ".join(errors))

    @property
    def data_path(self) -> str:
        if self.data_dir:
            return self.data_dir
        return os.environ.get(DATA_ENV[self.dataset], DEFAULT_DATA_DIR[self.dataset])

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["beta_grid"] = list(self.beta_grid)
        return out

    def digest(self) -> str:
        """Hash of everything except the output directory."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def stage_seed(self, stage: str) -> int:
        """Root seed fanned out per stage: ``SeedSequence([seed, crc32(stage)])``."""
        ss = np.random.SeedSequence([self.seed, zlib.crc32(stage.encode())])
        return int(ss.generate_state(1, dtype=np.uint32)[0])


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value):
    default = FIELDS[name].default
    if name == "data_dir":
        return None if value in (None, "") else str(value)
    if name == "beta_grid":
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        return tuple(float(v) for v in value)
    if isinstance(default, bool):
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    merged = {}
    for source in (file_values or {}, overrides or {}):
        unknown = sorted(set(source) - set(FIELDS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in source.items():
            if value is None and key != "data_dir":
                continue
            try:
                merged[key] = _coerce(key, value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: {exc}") from exc
    return RunConfig(**merged)


def load_config_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        values = yaml.safe_load(fh)
    if values is None:
        return {}
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: expected a flat key/value mapping")
    nested = [k for k, v in values.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: nested sections are not supported ({', '.join(nested)})")
    return values
