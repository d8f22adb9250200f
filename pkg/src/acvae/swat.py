"""SWaT "Physical" CSVs: preprocessing, chronological splits and a subsampled smoke run.

The normal-operation file holds more rows than the three splits use; the
surplus is dropped from the start (the plant's warm-up period).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import autodiff as ad
from .benchmark import fit_threshold
from .config import RunConfig
from .data import DataError, PreprocessState, apply_preprocess, fit_preprocess, load_csv, split_normal
from .evaluation import EvalReport, evaluate
from .model import AcvaeModel
from .scoring import score_series
from .signature import TimeSeriesMatrix, sliding_dataset
from .training import train

log = logging.getLogger(__name__)

SWAT_SPLITS = (336_560, 96_160, 48_080)


@dataclass
class SwatData:
    state: PreprocessState
    train: TimeSeriesMatrix
    val1: TimeSeriesMatrix
    val2: TimeSeriesMatrix
    attack: TimeSeriesMatrix


def find_files(root) -> tuple[Path, Path]:
    """The normal and attack CSVs inside ``root`` (matched by file name)."""
    csvs = sorted(Path(root).glob("*.csv"))
    normal = [p for p in csvs if "normal" in p.name.lower()]
    attack = [p for p in csvs if "attack" in p.name.lower()]
    if len(normal) != 1 or len(attack) != 1:
        raise DataError(f"{root}: expected one *normal*.csv and one *attack*.csv, found {[p.name for p in csvs]}")
    return normal[0], attack[0]


def prepare(normal: TimeSeriesMatrix, attack: TimeSeriesMatrix, splits=SWAT_SPLITS) -> SwatData:
    surplus = normal.T - sum(splits)
    if surplus < 0:
        raise DataError(f"normal file has {normal.T} rows, splits need {sum(splits)}")
    tr, v1, v2 = split_normal(normal.slice(surplus, normal.T), splits)
    state = fit_preprocess(tr)
    return SwatData(state, *(apply_preprocess(state, s) for s in (tr, v1, v2, attack)))


def subsample(series: TimeSeriesMatrix, every: int) -> TimeSeriesMatrix:
    return TimeSeriesMatrix(series.values[:, ::every].copy(), list(series.channels),
                            None if series.labels is None else series.labels[::every].copy())


def smoke_run(data: SwatData, rc: RunConfig, every: int = 10) -> EvalReport:
    """Train, calibrate and evaluate on every ``every``-th row of each split."""
    parts = [subsample(s, every) for s in (data.train, data.val1, data.val2, data.attack)]
    sig, hop = rc.signature, rc.data.hop
    tr, v1, v2, test = (sliding_dataset(s, sig, h) for s, h in zip(parts, (hop, hop, rc.data.fit_hop, hop)))
    cal = sliding_dataset(parts[1], sig, rc.data.cal_hop)
    model = AcvaeModel(rc.model_config(parts[0].m), ad.make_rng([rc.seed, 0x1417]))
    model, _ = train(tr.volumes, v1.volumes, model, rc.train, rc.seed)
    threshold = fit_threshold(model, v2, cal, rc.scoring, rc.threshold, rc.seed)
    scores = score_series(test, model, rc.scoring)
    if scores.labels is None:
        raise DataError("the attack file carries no labels")
    return evaluate(scores.scores, scores.labels, threshold.detect(scores.scores, scores.states))


def run_from_dir(root, rc: Optional[RunConfig] = None, every: int = 10) -> tuple[SwatData, EvalReport]:
    normal_path, attack_path = find_files(root)
    data = prepare(load_csv(normal_path), load_csv(attack_path))
    log.info("kept %d of %d features", len(data.state.kept_channels), len(data.state.channels))
    return data, smoke_run(data, rc or RunConfig(), every)
