"""Seeded synthetic benchmark: train, threshold and evaluate the three variants.

Layout per seed: the attack-free first half of the series is split
chronologically 0.7 / 0.2 / 0.1 into train, val1 (early stopping and the
eta quantile) and val2 (GPR fit); the second half, which holds every attack,
is the test set. Val1 is scored densely (``cal_hop``) for the eta quantile.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .data import PreprocessState, apply_preprocess, benchmark_config, fit_preprocess, split_normal, synth_generate
from .evaluation import EvalReport, evaluate, pr_curve, prauc
from .model import AcvaeModel, ModelConfig
from .scoring import ScoreSeries, ScoringConfig, score_series
from .signature import SignatureConfig, TimeSeriesMatrix, VolumeDataset, sliding_dataset
from .threshold import ThresholdConfig, ThresholdModel, calibrate_eta, fit_gpr, predict_mean
from .training import History, TrainConfig, train

log = logging.getLogger(__name__)

VARIANTS = {
    "aCVAE": dict(attention_enabled=True, stochastic_enabled=True),
    "3D-CVAE": dict(attention_enabled=False, stochastic_enabled=True),
    "3D-CAE": dict(attention_enabled=True, stochastic_enabled=False),
}


@dataclass
class BenchmarkConfig:
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    m: int = 8
    T: int = 40_000
    window: int = 30
    depth: int = 4
    frame_stride: int = 10
    splits: tuple[float, float, float] = (0.7, 0.2, 0.1)
    hop: int = 10
    fit_hop: int = 5  # val2 is short, so the GPR sees it more densely
    cal_hop: int = 2
    latent_dim: int = 100
    enc_channels: tuple[int, ...] = (8, 16, 32, 64)
    dtype: str = "float32"
    train: TrainConfig = field(default_factory=TrainConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    threshold: ThresholdConfig = field(default_factory=ThresholdConfig)

    @property
    def signature(self) -> SignatureConfig:
        return SignatureConfig(window=self.window, depth=self.depth, frame_stride=self.frame_stride)

    def model_config(self, variant: str) -> ModelConfig:
        return ModelConfig(m=self.m, k=self.depth, latent_dim=self.latent_dim, enc_channels=self.enc_channels,
                           dtype=self.dtype, **VARIANTS[variant])


@dataclass
class SeedData:
    series: TimeSeriesMatrix  # preprocessed, full length
    train: VolumeDataset
    val1: VolumeDataset
    val2: VolumeDataset
    test: VolumeDataset
    cal: VolumeDataset  # val1 range at cal_hop
    state: Optional[PreprocessState] = None


def split_datasets(series: TimeSeriesMatrix, normal_T: int, sig: SignatureConfig,
                   splits=(0.7, 0.2, 0.1), hop: int = 10, fit_hop: int = 5, cal_hop: int = 2) -> SeedData:
    """Volumes whose whole history lies inside each split of the first ``normal_T``
    steps, plus test volumes anchored after ``normal_T``."""
    counts = [int(round(f * normal_T)) for f in splits]
    edges = np.cumsum([0] + counts)
    bounds = list(zip(edges[:-1].tolist(), edges[1:].tolist()))

    def window(i, step):
        a, b = bounds[i]
        return sliding_dataset(series, sig, step, start=a + sig.min_anchor, stop=b + 1)

    if normal_T + hop <= series.T:
        test = sliding_dataset(series, sig, hop, start=normal_T + hop)
    else:
        test = VolumeDataset(np.zeros((0, sig.depth, series.m, series.m, 1)), np.zeros(0, dtype=np.int64),
                             None if series.labels is None else np.zeros(0, dtype=bool), sig.window)
    return SeedData(series, window(0, hop), window(1, hop), window(2, fit_hop), test, window(1, cal_hop))


def prepare(seed: int, cfg: BenchmarkConfig) -> SeedData:
    raw = synth_generate(benchmark_config(seed, cfg.m, cfg.T))
    normal_T = cfg.T // 2
    train_part, _, _ = split_normal(raw.slice(0, normal_T), cfg.splits)
    state = fit_preprocess(train_part)
    data = split_datasets(apply_preprocess(state, raw), normal_T, cfg.signature, cfg.splits, cfg.hop,
                          cfg.fit_hop, cfg.cal_hop)
    data.state = state
    return data


@dataclass
class VariantResult:
    variant: str
    seed: int
    history: History
    report: EvalReport  # prauc over the raw anomaly score
    margin_prauc: float  # prauc over score - f(z), the detector's own threshold family
    eta: float
    seconds: float
    model: AcvaeModel = field(repr=False, default=None)
    threshold: ThresholdModel = field(repr=False, default=None)
    scores: ScoreSeries = field(repr=False, default=None)

    def summary(self) -> dict:
        return {"variant": self.variant, "seed": self.seed, "prauc": self.report.prauc,
                "margin_prauc": self.margin_prauc,
                "precision": self.report.precision, "recall": self.report.recall, "f1": self.report.f1,
                "eta": self.eta, "best_epoch": self.history.best_epoch, "val": self.history.val,
                "seconds": self.seconds}


def fit_threshold(model: AcvaeModel, fit_data: VolumeDataset, cal_data: VolumeDataset, scoring: ScoringConfig,
                  cfg: ThresholdConfig, seed: int) -> ThresholdModel:
    """GPR on ``fit_data`` scores, then eta from ``cal_data`` unless ``cfg.eta`` fixes it."""
    fit_set = score_series(fit_data, model, scoring)
    gpr = fit_gpr(fit_set.states, fit_set.scores, cfg, ad.make_rng([seed, 0x6B7]))
    if cfg.eta is not None:
        return ThresholdModel(gpr, float(cfg.eta))
    cal = score_series(cal_data, model, scoring)
    return ThresholdModel(gpr, calibrate_eta(gpr, cal.states, cal.scores, cfg.target_fpr))


def run_variant(data: SeedData, variant: str, seed: int, cfg: BenchmarkConfig) -> VariantResult:
    t0 = time.perf_counter()
    model = AcvaeModel(cfg.model_config(variant), ad.make_rng([seed, 0x1417]))
    model, history = train(data.train.volumes, data.val1.volumes, model, cfg.train, seed)
    scoring = ScoringConfig(cfg.scoring.mc_samples, seed, cfg.scoring.chunk)
    threshold = fit_threshold(model, data.val2, data.cal, scoring, cfg.threshold, seed)
    scores = score_series(data.test, model, scoring)
    flags = threshold.detect(scores.scores, scores.states)
    report = evaluate(scores.scores, scores.labels, flags)
    margin = prauc(pr_curve(scores.scores - predict_mean(threshold.gpr, scores.states), scores.labels))
    secs = time.perf_counter() - t0
    log.info("%s seed %d: prauc %.4f margin %.4f f1 %.4f (%.1fs)", variant, seed, report.prauc, margin,
             report.f1, secs)
    return VariantResult(variant, seed, history, report, margin, threshold.eta, secs, model, threshold, scores)


def run_benchmark(cfg: BenchmarkConfig, variants=tuple(VARIANTS)) -> list[VariantResult]:
    results = []
    for seed in cfg.seeds:
        data = prepare(seed, cfg)
        for v in variants:
            results.append(run_variant(data, v, seed, cfg))
    return results


def mean_prauc(results: list[VariantResult], margin: bool = False) -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in results:
        out.setdefault(r.variant, []).append(r.margin_prauc if margin else r.report.prauc)
    return {k: float(np.mean(v)) for k, v in out.items()}


def config_dict(cfg: BenchmarkConfig) -> dict:
    return asdict(cfg)
