"""Run configuration: one JSON document covering every stage of the pipeline.

Sections mirror the module configs. Unknown keys and wrongly typed values are
rejected before any work starts.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Optional

from .model import ModelConfig
from .scoring import ScoringConfig
from .signature import SignatureConfig
from .threshold import ThresholdConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    """Synthetic generator size and how a series is cut into splits."""

    m: int = 8
    T: int = 40_000
    n_drivers: int = 3
    noise_std: float = 0.02
    n_attacks: int = 8
    attack_fraction: float = 0.05
    splits: tuple[float, float, float] = (0.7, 0.2, 0.1)
    normal_steps: Optional[int] = None  # None: everything before the first labelled attack
    hop: int = 10
    fit_hop: int = 5
    cal_hop: int = 2
    score_hop: int = 1
    score_start: Optional[int] = None  # None: first anchor after the normal prefix

    def __post_init__(self):
        self.splits = tuple(float(f) for f in self.splits)
        if len(self.splits) != 3 or any(f <= 0 for f in self.splits) or sum(self.splits) > 1 + 1e-12:
            raise ValueError("splits must be three positive fractions summing to at most 1")
        if min(self.hop, self.fit_hop, self.cal_hop, self.score_hop) < 1:
            raise ValueError("hops must be >= 1")


@dataclass
class PathsConfig:
    data: Optional[str] = None
    checkpoint: Optional[str] = None
    out: Optional[str] = None


# desk-scale defaults that differ from the model's own
MODEL_DEFAULTS = {"enc_channels": [8, 16, 32, 64], "dtype": "float32"}
_MODEL_FIELDS = [f for f in dataclasses.fields(ModelConfig) if f.name not in ("m", "k")]


@dataclass
class RunConfig:
    seed: int = 0
    signature: SignatureConfig = field(default_factory=lambda: SignatureConfig(window=30))
    model: dict = field(default_factory=dict)  # ModelConfig fields except m and k
    train: TrainConfig = field(default_factory=TrainConfig)
    mc_samples: int = 16
    score_chunk: int = 256
    threshold: ThresholdConfig = field(default_factory=ThresholdConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        self.model = {**MODEL_DEFAULTS, **self.model}
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.scoring  # validates mc_samples and chunk

    @property
    def scoring(self) -> ScoringConfig:
        return ScoringConfig(self.mc_samples, self.seed, self.score_chunk)

    def model_config(self, m: int) -> ModelConfig:
        return ModelConfig(m=m, k=self.signature.depth, **self.model)

    def to_dict(self, paths: bool = True) -> dict:
        d = {"seed": self.seed,
             "signature": dataclasses.asdict(self.signature),
             "model": _jsonable(self.model),
             "train": self.train.to_dict(),
             "mc_samples": self.mc_samples,
             "score_chunk": self.score_chunk,
             "threshold": self.threshold.to_dict(),
             "data": _jsonable(dataclasses.asdict(self.data))}
        if paths:
            d["paths"] = dataclasses.asdict(self.paths)
        return d

    def to_json(self, paths: bool = True) -> str:
        return json.dumps(self.to_dict(paths), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        top = {f.name: f for f in dataclasses.fields(cls)}
        _reject_unknown(d, top, "")
        kw: dict[str, Any] = {}
        for key, value in d.items():
            if key in ("seed", "mc_samples", "score_chunk"):
                kw[key] = _check_value(value, top[key].default, key)
            elif key == "model":
                kw[key] = _section(value, {f.name: f for f in _MODEL_FIELDS}, key, MODEL_DEFAULTS)
            else:
                sub = {"signature": SignatureConfig, "train": TrainConfig, "threshold": ThresholdConfig,
                       "data": DataConfig, "paths": PathsConfig}[key]
                fields = {f.name: f for f in dataclasses.fields(sub)}
                kw[key] = _build(sub, _section(value, fields, key), key)
        try:
            cfg = cls(**kw)
            cfg.model_config(1)  # validate the model section early
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _reject_unknown(d: dict, fields: dict, where: str) -> None:
    unknown = sorted(set(d) - set(fields))
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")


def _check_value(value, default, where: str):
    """Type check against the field default (None defaults accept None or a number)."""
    ok: bool
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (tuple, list)):
        ok = isinstance(value, list)
    elif default is None:
        ok = value is None or (isinstance(value, (int, float, str)) and not isinstance(value, bool))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
    return value


def _default_of(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
        return f.default_factory()  # type: ignore[misc]
    return None


def _section(value, fields: dict, where: str, overrides: dict | None = None) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{where}: expected an object")
    _reject_unknown(value, fields, where)
    overrides = overrides or {}
    for k, v in value.items():
        _check_value(v, overrides.get(k, _default_of(fields[k])), f"{where}.{k}")
    return value


def _build(cls, kw: dict, where: str):
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
