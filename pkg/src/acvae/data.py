"""CSV ingestion, train-fitted preprocessing, chronological splits and a
seeded synthetic ICS benchmark with attack injection."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .signature import TimeSeriesMatrix

log = logging.getLogger(__name__)

LABEL_NAMES = ("label", "labels", "normal/attack", "attack", "anomaly")
TIMESTAMP_NAMES = ("timestamp", "time", "datetime")


class DataError(ValueError):
    """Malformed input data."""


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

@dataclass
class CsvSchema:
    """Column roles. ``None`` means detect by header name."""

    label_column: Optional[str] = None
    timestamp_column: Optional[str] = None
    drop_columns: Sequence[str] = ()


def _parse_label(raw: str, row: int) -> bool:
    v = raw.strip().lower().replace(" ", "")
    if v in ("normal", "0", "0.0", "false"):
        return False
    if v in ("attack", "1", "1.0", "true", "anomaly"):
        return True
    raise DataError(f"row {row}: unrecognised label {raw!r}")


def load_csv(path, schema: CsvSchema | None = None) -> TimeSeriesMatrix:
    schema = schema or CsvSchema()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        lower = [h.lower() for h in header]

        def find(explicit, names):
            if explicit is not None:
                if explicit.strip() not in header:
                    raise DataError(f"{path}: column {explicit!r} not in header")
                return header.index(explicit.strip())
            for i, h in enumerate(lower):
                if h in names:
                    return i
            return None

        label_idx = find(schema.label_column, LABEL_NAMES)
        ts_idx = find(schema.timestamp_column, TIMESTAMP_NAMES)
        skip = {label_idx, ts_idx} | {header.index(c) for c in schema.drop_columns if c in header}
        value_idx = [i for i in range(len(header)) if i not in skip]
        if not value_idx:
            raise DataError(f"{path}: no value columns")

        rows, labels, stamps = [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(rec)} fields, header has {len(header)}")
            try:
                rows.append([float(rec[i]) for i in value_idx])
            except ValueError as exc:
                raise DataError(f"{path}: row {lineno}: unparseable number ({exc})") from None
            if label_idx is not None:
                labels.append(_parse_label(rec[label_idx], lineno))
            if ts_idx is not None:
                stamps.append(rec[ts_idx].strip())
    if not rows:
        raise DataError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=np.float64).T
    return TimeSeriesMatrix(
        values,
        [header[i] for i in value_idx],
        np.asarray(labels, dtype=bool) if label_idx is not None else None,
        stamps if ts_idx is not None else None,
    )


def write_csv(series: TimeSeriesMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(series.channels) + (["label"] if series.labels is not None else []))
        for t in range(series.T):
            row = [repr(float(v)) for v in series.values[:, t]]
            if series.labels is not None:
                row.append("1" if series.labels[t] else "0")
            w.writerow(row)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

@dataclass
class PreprocessState:
    channels: list[str]  # all channels seen at fit time
    keep: np.ndarray  # boolean mask over ``channels``
    minimum: np.ndarray  # per kept channel
    maximum: np.ndarray

    @property
    def kept_channels(self) -> list[str]:
        return [c for c, k in zip(self.channels, self.keep) if k]

    def to_dict(self) -> dict:
        return {"channels": self.channels, "keep": self.keep.tolist(),
                "min": self.minimum.tolist(), "max": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessState":
        return cls(list(d["channels"]), np.asarray(d["keep"], dtype=bool),
                   np.asarray(d["min"], dtype=np.float64), np.asarray(d["max"], dtype=np.float64))


def fit_preprocess(train: TimeSeriesMatrix) -> PreprocessState:
    """Drop zero-variance channels and record the train min/max of the rest."""
    if train.T == 0:
        raise DataError("empty training split")
    keep = train.values.var(axis=1) > 0
    if not keep.any():
        raise DataError("every feature is constant on the training split")
    kept = train.values[keep]
    dropped = [c for c, k in zip(train.channels, keep) if not k]
    if dropped:
        log.info("dropping %d constant features: %s", len(dropped), ", ".join(dropped))
    return PreprocessState(list(train.channels), keep, kept.min(axis=1), kept.max(axis=1))


def apply_preprocess(state: PreprocessState, series: TimeSeriesMatrix) -> TimeSeriesMatrix:
    """Mask then min-max scale with the train range. Out-of-range values are not clipped."""
    pos = {c: i for i, c in enumerate(series.channels)}
    missing = [c for c in state.kept_channels if c not in pos]
    if missing:
        raise DataError(f"series lacks features seen at fit time: {missing}")
    unknown = [c for c in series.channels if c not in state.channels]
    if unknown:
        raise DataError(f"unknown features not seen at fit time: {unknown}")
    rows = series.values[[pos[c] for c in state.kept_channels]]
    scaled = (rows - state.minimum[:, None]) / (state.maximum - state.minimum)[:, None]
    return TimeSeriesMatrix(scaled, state.kept_channels,
                            None if series.labels is None else series.labels.copy(),
                            series.timestamps)


def split_normal(series: TimeSeriesMatrix, sizes: Sequence[float]):
    """Contiguous chronological (train, val1, val2) split.

    ``sizes`` are either three integer counts or three fractions of T.
    """
    if len(sizes) != 3:
        raise DataError("need exactly three split sizes")
    if all(isinstance(s, (int, np.integer)) for s in sizes):
        counts = [int(s) for s in sizes]
    else:
        if sum(sizes) > 1.0 + 1e-12:
            raise DataError(f"split fractions {tuple(sizes)} sum to more than 1")
        counts = [int(round(f * series.T)) for f in sizes]
    if any(c < 0 for c in counts) or sum(counts) > series.T:
        raise DataError(f"split counts {counts} exceed series length {series.T}")
    a, b = counts[0], counts[0] + counts[1]
    return series.slice(0, a), series.slice(a, b), series.slice(b, b + counts[2])


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------

ATTACK_KINDS = ("stuck_at", "bias", "drift", "spoof_swap")


@dataclass
class Attack:
    kind: str
    channels: list[int]
    start: int
    duration: int
    magnitude: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.duration < 1:
            raise ValueError("attack duration must be >= 1")
        need = 2 if self.kind == "spoof_swap" else 1
        if len(self.channels) != need:
            raise ValueError(f"{self.kind} needs {need} channel(s), got {self.channels}")
        if self.kind in ("bias", "drift") and self.magnitude is None:
            raise ValueError(f"{self.kind} needs a magnitude")

    @property
    def stop(self) -> int:
        return self.start + self.duration


@dataclass
class SynthConfig:
    m: int = 8
    T: int = 40_000
    n_drivers: int = 3
    noise_std: float = 0.02
    attacks: list[Attack] = field(default_factory=list)
    seed: int = 0
    period_range: tuple[float, float] = (60.0, 600.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["period_range"] = list(self.period_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        d["attacks"] = [Attack(**a) for a in d.get("attacks", [])]
        if "period_range" in d:
            d["period_range"] = tuple(d["period_range"])
        return cls(**d)


def default_attacks(m: int = 8, T: int = 40_000, seed: int = 0, n_attacks: int = 8,
                    total_fraction: float = 0.05) -> list[Attack]:
    """Attack schedule for the benchmark: evenly spaced in the second half of the
    series, one of each kind in turn, ``total_fraction * T`` labelled seconds."""
    rng = np.random.default_rng([seed, 0xA77AC])
    duration = int(round(total_fraction * T / n_attacks))
    slot = (T // 2) // n_attacks
    attacks = []
    for i in range(n_attacks):
        kind = ATTACK_KINDS[i % len(ATTACK_KINDS)]
        start = T // 2 + i * slot + (slot - duration) // 2
        if kind == "spoof_swap":
            chans = sorted(int(c) for c in rng.choice(m, size=2, replace=False))
            mag = None
        else:
            chans = [int(rng.integers(m))]
            mag = {"stuck_at": None, "bias": 0.3, "drift": 0.5}[kind]
            if kind == "bias" and rng.random() < 0.5:
                mag = -mag
        attacks.append(Attack(kind, chans, start, duration, mag))
    return attacks


def benchmark_config(seed: int, m: int = 8, T: int = 40_000) -> SynthConfig:
    return SynthConfig(m=m, T=T, attacks=default_attacks(m, T, seed), seed=seed)


def _check_attacks(cfg: SynthConfig) -> None:
    per_channel: dict[int, list[Attack]] = {}
    for a in cfg.attacks:
        if a.start < 0 or a.stop > cfg.T:
            raise ValueError(f"attack {a} outside [0, {cfg.T})")
        for c in a.channels:
            if not 0 <= c < cfg.m:
                raise ValueError(f"attack channel {c} out of range for m={cfg.m}")
            for other in per_channel.get(c, []):
                if a.start < other.stop and other.start < a.stop:
                    raise ValueError(f"overlapping attacks on channel {c}: {other} and {a}")
            per_channel.setdefault(c, []).append(a)


def synth_mixing(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Driver periods, phases and the m x n_drivers nonnegative mixing weights.

    Driver 0 feeds every channel, so each pair of channels shares a driver.
    """
    if cfg.m < 1 or cfg.T < 1 or cfg.n_drivers < 1:
        raise ValueError("m, T and n_drivers must be positive")
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.period_range
    periods = rng.uniform(lo, hi, cfg.n_drivers)
    phases = rng.uniform(0, 2 * np.pi, cfg.n_drivers)
    weights = rng.uniform(0.2, 1.0, (cfg.m, cfg.n_drivers))
    mask = rng.random((cfg.m, cfg.n_drivers)) < 0.6
    mask[:, 0] = True
    return periods, phases, weights * mask


def synth_base(cfg: SynthConfig) -> np.ndarray:
    """Attack-free channels (m x T).

    Each channel is its mixture of the shared sinusoidal drivers, mapped
    through the mixture's own amplitude bound onto [0.1, 0.9], plus noise.
    Noise is drawn time-major so a longer series extends a shorter one with
    the same seed.
    """
    periods, phases, weights = synth_mixing(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    t = np.arange(cfg.T, dtype=np.float64)
    drivers = np.sin(2 * np.pi * t[None, :] / periods[:, None] + phases[:, None])
    mix = weights @ drivers
    amp = weights.sum(axis=1, keepdims=True)
    clean = 0.1 + 0.8 * (mix + amp) / (2 * amp)
    noise = rng.normal(0.0, cfg.noise_std, size=(cfg.T, cfg.m)).T
    return clean + noise


def synth_generate(cfg: SynthConfig) -> TimeSeriesMatrix:
    _check_attacks(cfg)
    base = synth_base(cfg)
    values = base.copy()
    labels = np.zeros(cfg.T, dtype=bool)
    for a in cfg.attacks:
        sl = slice(a.start, a.stop)
        if a.kind == "stuck_at":
            c = a.channels[0]
            values[c, sl] = base[c, a.start] if a.magnitude is None else a.magnitude
        elif a.kind == "bias":
            values[a.channels[0], sl] += a.magnitude
        elif a.kind == "drift":
            values[a.channels[0], sl] += a.magnitude * np.arange(1, a.duration + 1) / a.duration
        else:
            i, j = a.channels
            values[i, sl], values[j, sl] = base[j, sl].copy(), base[i, sl].copy()
        labels[sl] = True
    return TimeSeriesMatrix(values, [f"ch{i:02d}" for i in range(cfg.m)], labels)


def write_manifest(cfg: SynthConfig, csv_path) -> Path:
    path = Path(csv_path).with_suffix(".json")
    path.write_text(json.dumps(cfg.to_dict(), indent=2))
    return path
