"""Run configuration: one JSON document with ``world``, ``model``, ``train``, ``rollout`` and ``eval``."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .checkpoint import canonical_json
from .curriculum import TrainConfig
from .errors import ValidationError
from .evalmetrics import CHAMFER_CONVENTION
from .flowformer import ModelConfig
from .rollout import RolloutPlan
from .toyworld import WorldConfig

SECTIONS = ("world", "model", "train", "rollout", "eval")


@dataclass(frozen=True)
class EvalConfig:
    fps_samples: int = 20000
    fps_start: int = 0
    delta_threshold: float = 1.25
    align: bool = True

    def __post_init__(self):
        if self.fps_samples < 1:
            raise ValidationError("eval.fps_samples must be >= 1")
        if self.fps_start < 0:
            raise ValidationError("eval.fps_start must be >= 0")
        if self.delta_threshold <= 1.0:
            raise ValidationError("eval.delta_threshold must be > 1")


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rollout: RolloutPlan = field(default_factory=RolloutPlan)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if (self.rollout.k, self.rollout.m) != (self.model.k, self.model.m):
            raise ValidationError(f"rollout (k={self.rollout.k}, m={self.rollout.m}) must match "
                                  f"model (k={self.model.k}, m={self.model.m})")

    def to_dict(self) -> dict:
        return {s: asdict(getattr(self, s)) for s in SECTIONS}

    def digest(self) -> str:
        return config_hash(self.to_dict())

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)


_TYPES = {"world": WorldConfig, "model": ModelConfig, "train": TrainConfig,
          "rollout": RolloutPlan, "eval": EvalConfig}


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def _check_type(section: str, f: dataclasses.Field, value):
    ann = str(f.type)
    ok = True
    if value is None:
        ok = "None" in ann
    elif isinstance(value, bool):
        ok = "bool" in ann
    elif isinstance(value, int):
        ok = "int" in ann or "float" in ann
    elif isinstance(value, float):
        ok = "float" in ann
    elif isinstance(value, str):
        ok = "str" in ann
    else:
        ok = False
    if not ok:
        raise ValidationError(f"{section}.{f.name}: expected {ann}, got {type(value).__name__}")


def _section(name: str, data) -> object:
    cls = _TYPES[name]
    if not isinstance(data, dict):
        raise ValidationError(f"config section {name!r} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ValidationError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    for key, value in data.items():
        _check_type(name, fields[key], value)
    kwargs = dict(data)
    for key, value in kwargs.items():
        if isinstance(value, int) and not isinstance(value, bool) and "float" in str(fields[key].type) \
                and "int" not in str(fields[key].type):
            kwargs[key] = float(value)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"section {name!r}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ValidationError("config must be a JSON object")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ValidationError(f"unknown config section(s): {', '.join(unknown)}")
    return RunConfig(**{s: _section(s, data[s]) for s in SECTIONS if s in data})


def load(path) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)


def header(cfg: RunConfig | dict | None, **extra) -> dict:
    """Provenance block written at the top of every CSV/JSON output."""
    d = cfg.to_dict() if isinstance(cfg, RunConfig) else (cfg or {})
    out = {"config_hash": config_hash(d),
           "chamfer": CHAMFER_CONVENTION,
           "poses": "world-to-camera R (row-major) then t",
           "tau": "tau=0 data, tau=1 noise"}
    out.update(extra)
    return out
