"""Run configuration: config file, then command-line flags, then environment overrides."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .gatekeeper import DEFAULT_FLOOR
from .surrogate import POOL_ALIASES, TrainConfig
from .traces import DEFAULT_FRACTIONS, check_fractions

ENV_PREFIX = "TRACEGATE_"


@dataclass(frozen=True)
class RunConfig:
    alpha: float = 0.95
    floor: float = DEFAULT_FLOOR
    splits: tuple[float, float, float, float] = DEFAULT_FRACTIONS
    seed: int = 0
    pool: tuple[str, ...] = ("lr", "mlp", "centroid")
    epochs: int = 200
    learning_rate: float = 0.1
    l2: float = 1e-4
    batch_size: int = 256
    hidden: int = 64
    temperature: float = 1.0
    teacher_oracle: str | None = None
    teacher_url: str | None = None
    out: str = "tracegate-run"
    pair_cap: int = 5
    disagreement_cap: int = 10
    price_per_1k: float = 2.60
    daily_volume: int = 10_000
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0.0 <= self.floor <= 1.0:
            raise ValueError(f"floor must lie in [0, 1], got {self.floor}")
        object.__setattr__(self, "splits", check_fractions(self.splits))
        bad = [p for p in self.pool if p not in POOL_ALIASES]
        if bad or not self.pool:
            raise ValueError(f"unknown pool member(s) {bad}; choose from {sorted(POOL_ALIASES)}")
        if self.teacher_oracle and self.teacher_url:
            raise ValueError("configure at most one of teacher_oracle and teacher_url")
        self.train_config()  # validates optimizer settings

    @property
    def teacher_mode(self) -> str:
        if self.teacher_oracle:
            return "oracle"
        return "remote" if self.teacher_url else "none"

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            seed=self.seed,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            l2=self.l2,
            batch_size=self.batch_size,
            hidden=self.hidden,
            temperature=self.temperature,
            pool=tuple(self.pool),
        )

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc.pop("extra")
        doc["splits"] = list(self.splits)
        doc["pool"] = list(self.pool)
        return doc

    @property
    def out_dir(self) -> Path:
        return Path(self.out)


def _coerce(name: str, value: Any) -> Any:
    if value is None:
        return None
    if name in ("splits", "pool") and isinstance(value, str):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        return tuple(float(p) for p in parts) if name == "splits" else tuple(parts)
    if name in ("splits", "pool"):
        return tuple(float(v) for v in value) if name == "splits" else tuple(value)
    kinds = {f.name: f.type for f in fields(RunConfig)}
    kind = kinds[name]
    if kind in ("float", float):
        return float(value)
    if kind in ("int", int):
        return int(value)
    return str(value)


_FIELD_NAMES = {f.name for f in fields(RunConfig)} - {"extra"}


def load_config_file(path: str | Path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    doc = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a mapping")
    unknown = set(doc) - _FIELD_NAMES
    if unknown:
        raise ValueError(f"{path}: unknown config key(s) {sorted(unknown)}")
    return doc


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name in _FIELD_NAMES:
        key = ENV_PREFIX + name.upper()
        if key in environ:
            out[name] = environ[key]
    return out


def resolve_config(
    config_file: str | Path | None = None,
    flags: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """Layer config-file values, explicit flags and ``TRACEGATE_*`` variables, in that order."""
    merged: dict[str, Any] = {}
    if config_file:
        merged.update(load_config_file(config_file))
    merged.update({k: v for k, v in (flags or {}).items() if v is not None})
    merged.update(env_overrides(environ))
    return RunConfig(**{k: _coerce(k, v) for k, v in merged.items()})


def with_alpha(cfg: RunConfig, alpha: float) -> RunConfig:
    return replace(cfg, alpha=alpha)
