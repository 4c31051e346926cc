"""Run configuration: schema, defaults, validation, file loading."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .fedopt import METHODS, AggConfig, ClientConfig

SEED_ENV = "FEDPROXY_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    n_blocks: int = 6
    width: int = 8
    input_dim: int = 4
    out_dim: int = 1
    block_scale: float = 0.5


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 300
    lr: float = 0.05
    n_samples: int = 256
    batch_size: Optional[int] = 32


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str = "heterogeneous"
    K: int = 4
    noise_sd: float = 0.05


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    kappa: float = 0.5
    rounds: int = 5
    bi_samples: int = 128
    agg: AggConfig = field(default_factory=AggConfig)
    client: ClientConfig = field(default_factory=ClientConfig)
    output_dir: str = "runs/default"
    master_seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_method(self, method: str) -> "RunConfig":
        return dataclasses.replace(self, agg=dataclasses.replace(self.agg, method=method))


_SECTIONS = {
    "backbone": BackboneConfig,
    "pretrain": PretrainConfig,
    "scenario": ScenarioConfig,
    "agg": AggConfig,
    "client": ClientConfig,
}


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a table/object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a table/object")
    top = {}
    for key, value in data.items():
        if key in _SECTIONS:
            top[key] = _build(_SECTIONS[key], value, key)
        else:
            top[key] = value
    cfg = _build(RunConfig, top, "config")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    b = cfg.backbone
    if b.n_blocks < 1 or b.width < 1 or b.input_dim < 1 or b.out_dim < 1:
        raise ConfigError("backbone dimensions must be >= 1")
    if cfg.rounds < 1:
        raise ConfigError("rounds must be >= 1")
    if not 0.0 <= cfg.kappa < 1.0:
        raise ConfigError("kappa must lie in [0, 1)")
    if cfg.scenario.K < 1:
        raise ConfigError("scenario.K must be >= 1")
    if cfg.scenario.kind not in ("homogeneous", "heterogeneous", "conflicting"):
        raise ConfigError(f"unknown scenario kind {cfg.scenario.kind!r}")
    if cfg.bi_samples < 1:
        raise ConfigError("bi_samples must be >= 1")
    if cfg.pretrain.steps < 0 or cfg.pretrain.lr <= 0 or cfg.pretrain.n_samples < 1:
        raise ConfigError("pretrain needs steps >= 0, lr > 0, n_samples >= 1")
    if cfg.agg.method not in METHODS:
        raise ConfigError(f"unknown method {cfg.agg.method!r}")
    if not isinstance(cfg.master_seed, int) or cfg.master_seed < 0:
        raise ConfigError("master_seed must be a non-negative integer")


def _read(path: Path) -> dict:
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(path: str | os.PathLike | None = None, env: Optional[dict] = None) -> RunConfig:
    """Load a JSON or TOML config (defaults when ``path`` is None); FEDPROXY_SEED overrides the master seed."""
    env = os.environ if env is None else env
    data = {} if path is None else _read(Path(path))
    if SEED_ENV in env and env[SEED_ENV] != "":
        try:
            data["master_seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    return config_from_dict(data)
