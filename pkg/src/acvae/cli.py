"""Command-line pipeline: synth -> preprocess -> train -> calibrate -> score -> eval / export-pr.

Exit codes: 0 success, 1 usage or configuration error, 2 data or model error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .benchmark import fit_threshold, split_datasets
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .data import (DataError, SynthConfig, apply_preprocess, default_attacks, fit_preprocess, load_csv,
                   split_normal, synth_generate, write_csv, write_manifest)
from .evaluation import evaluate, pr_curve, write_pr_csv
from .model import AcvaeModel
from .scoring import score_series
from .signature import TimeSeriesMatrix, sliding_dataset
from .threshold import GprError, ThresholdConfig
from .training import TrainingError, train

log = logging.getLogger("acvae")

COMMANDS = ("synth", "preprocess", "train", "calibrate", "score", "eval", "export-pr")
SCORE_COLUMNS = ("anchor", "score", "tau", "flag", "label")
REQUIRED = {
    "synth": ("out",),
    "preprocess": ("data", "out"),
    "train": ("data", "checkpoint"),
    "calibrate": ("data", "checkpoint"),
    "score": ("data", "checkpoint", "out"),
    "eval": ("data",),
    "export-pr": ("data", "out"),
}
DATA_ERRORS = (DataError, CheckpointError, GprError, TrainingError, ad.ShapeError, OSError, KeyError, ValueError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text} must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=_u64, help="master seed")
    common.add_argument("--data", action="append", help="input CSV (eval and export-pr accept several)")
    common.add_argument("--checkpoint", help="checkpoint path")
    common.add_argument("--out", help="output path")
    common.add_argument("--window", type=_positive_int, help="signature window length w")
    common.add_argument("--eta", type=float, help="fixed threshold offset (skips calibration)")
    common.add_argument("--target-fpr", type=float, help="false-positive rate targeted by eta")
    common.add_argument("--mc-samples", type=_positive_int, help="Monte-Carlo samples per score")

    parser = _Parser(prog="acvae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    helps = {
        "synth": "generate the seeded synthetic benchmark CSV",
        "preprocess": "drop constant features and min-max scale with train statistics",
        "train": "train a model and write a checkpoint",
        "calibrate": "fit the GPR threshold and eta, and add them to the checkpoint",
        "score": "write anchor, score, tau, flag, label for the test segment",
        "eval": "metrics report from one or more score CSVs",
        "export-pr": "precision-recall points from score CSVs",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def resolve_config(args, checkpoint_config: Optional[dict] = None) -> RunConfig:
    """Config file, else the checkpoint's own snapshot, else defaults; flags override."""
    if args.config:
        try:
            rc = RunConfig.load(args.config)
        except OSError as exc:
            raise UsageError(f"--config: cannot read {args.config}: {exc.strerror}") from None
    elif checkpoint_config:
        rc = RunConfig.from_dict(checkpoint_config)
    else:
        rc = RunConfig()
    if args.seed is not None:
        rc.seed = args.seed
    if args.window is not None:
        rc.signature = dataclasses.replace(rc.signature, window=args.window)
    if args.mc_samples is not None:
        rc.mc_samples = args.mc_samples
    overrides = {}
    if args.target_fpr is not None:
        overrides["target_fpr"] = args.target_fpr
    if args.eta is not None:
        overrides["eta"] = args.eta
    if overrides:
        try:
            rc.threshold = ThresholdConfig(**{**rc.threshold.to_dict(), **overrides})
        except ValueError as exc:
            flag = "--target-fpr" if "target_fpr" in str(exc) else "--eta"
            raise UsageError(f"{flag}: {exc}") from None
    if args.data:
        rc.paths.data = args.data[0]
    if args.checkpoint:
        rc.paths.checkpoint = args.checkpoint
    if args.out:
        rc.paths.out = args.out
    return rc


def _require(command: str, args, rc: RunConfig) -> None:
    for name in REQUIRED[command]:
        if getattr(rc.paths, name) is None:
            raise UsageError(f"{command}: --{name} is required (or set paths.{name} in the config)")


def _checkpoint_config(args) -> Optional[dict]:
    path = args.checkpoint
    if args.config or not path or not Path(path).exists():
        return None
    from .checkpoint import read_manifest

    return read_manifest(Path(path).read_bytes())[0].get("run_config") or None


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def normal_steps(series: TimeSeriesMatrix, rc: RunConfig) -> int:
    """Length of the attack-free prefix used for train/val1/val2."""
    if rc.data.normal_steps is not None:
        n = rc.data.normal_steps
    elif series.labels is not None and series.labels.any():
        n = int(np.argmax(series.labels))
    else:
        n = series.T
    if not 0 < n <= series.T:
        raise DataError(f"normal prefix of {n} steps does not fit a series of {series.T}")
    return n


def _splits(series: TimeSeriesMatrix, rc: RunConfig):
    d = rc.data
    return split_datasets(series, normal_steps(series, rc), rc.signature, d.splits, d.hop, d.fit_hop, d.cal_hop)


def _preprocess_sidecar(data_path) -> Path:
    return Path(str(data_path) + ".preprocess.json")


def write_score_csv(path, anchors, scores, tau, flags, labels=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS)
        for i in range(len(anchors)):
            label = "" if labels is None else str(int(bool(labels[i])))
            w.writerow([int(anchors[i]), repr(float(scores[i])), repr(float(tau[i])), int(bool(flags[i])), label])


def read_score_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != SCORE_COLUMNS:
        raise DataError(f"{path}: expected header {','.join(SCORE_COLUMNS)}")
    body = rows[1:]
    try:
        out = {
            "anchor": np.array([int(r[0]) for r in body], dtype=np.int64),
            "score": np.array([float(r[1]) for r in body]),
            "tau": np.array([float(r[2]) for r in body]),
            "flag": np.array([r[3] == "1" for r in body], dtype=bool),
        }
        labels = [r[4] for r in body]
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed score row: {exc}") from None
    out["label"] = None if any(v == "" for v in labels) else np.array([v == "1" for v in labels], dtype=bool)
    return out


def _read_scores(paths: Sequence[str]) -> dict[str, np.ndarray]:
    parts = [read_score_csv(p) for p in paths]
    if any(p["label"] is None for p in parts):
        raise DataError("score CSVs need a label for every row to be evaluated")
    return {k: np.concatenate([p[k] for p in parts]) for k in ("score", "flag", "label")}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, rc: RunConfig) -> None:
    d = rc.data
    cfg = SynthConfig(m=d.m, T=d.T, n_drivers=d.n_drivers, noise_std=d.noise_std, seed=rc.seed,
                      attacks=default_attacks(d.m, d.T, rc.seed, d.n_attacks, d.attack_fraction))
    series = synth_generate(cfg)
    write_csv(series, rc.paths.out)
    write_manifest(cfg, rc.paths.out)
    log.info("wrote %d x %d series with %d attacks to %s", series.m, series.T, len(cfg.attacks), rc.paths.out)


def cmd_preprocess(args, rc: RunConfig) -> None:
    series = load_csv(rc.paths.data)
    n = normal_steps(series, rc)
    train_part, _, _ = split_normal(series.slice(0, n), rc.data.splits)
    state = fit_preprocess(train_part)
    write_csv(apply_preprocess(state, series), rc.paths.out)
    _preprocess_sidecar(rc.paths.out).write_text(json.dumps({"normal_steps": n, **state.to_dict()}))
    log.info("kept %d of %d features", len(state.kept_channels), len(state.channels))


def cmd_train(args, rc: RunConfig) -> None:
    series = load_csv(rc.paths.data)
    data = _splits(series, rc)
    model = AcvaeModel(rc.model_config(series.m), ad.make_rng([rc.seed, 0x1417]))
    model, history = train(data.train.volumes, data.val1.volumes, model, rc.train, rc.seed)
    sidecar = _preprocess_sidecar(rc.paths.data)
    prep = json.loads(sidecar.read_text()) if sidecar.exists() else None
    save_checkpoint(model, None, rc.paths.checkpoint, rc.to_dict(paths=False), prep)
    log.info("best epoch %d (val %.6g); checkpoint %s", history.best_epoch, history.val[history.best_epoch],
             rc.paths.checkpoint)


def cmd_calibrate(args, rc: RunConfig) -> None:
    ck = load_checkpoint(rc.paths.checkpoint)
    series = load_csv(rc.paths.data)
    data = _splits(series, rc)
    threshold = fit_threshold(ck.model, data.val2, data.cal, rc.scoring, rc.threshold, rc.seed)
    save_checkpoint(ck.model, threshold, rc.paths.checkpoint, rc.to_dict(paths=False), ck.preprocess)
    log.info("eta %.6g from %d calibration volumes", threshold.eta, len(data.cal))


def cmd_score(args, rc: RunConfig) -> None:
    ck = load_checkpoint(rc.paths.checkpoint)
    if ck.threshold is None:
        raise CheckpointError(f"{rc.paths.checkpoint} has no threshold; run calibrate first")
    series = load_csv(rc.paths.data)
    start = rc.data.score_start
    if start is None:
        n = normal_steps(series, rc)
        start = n + rc.data.score_hop if n < series.T else 0
    ds = sliding_dataset(series, rc.signature, rc.data.score_hop, start=start)
    ss = score_series(ds, ck.model, rc.scoring)
    tau = ck.threshold.tau(ss.states) if len(ss) else np.zeros(0)
    flags = ss.scores > tau
    write_score_csv(rc.paths.out, ss.anchors, ss.scores, tau, flags, ss.labels)
    log.info("scored %d volumes, %d flagged", len(ss), int(flags.sum()))


def cmd_eval(args, rc: RunConfig) -> None:
    s = _read_scores(args.data or [rc.paths.data])
    report = evaluate(s["score"], s["label"], s["flag"])
    text = report.to_json()
    if rc.paths.out:
        Path(rc.paths.out).write_text(text + "\n")
    else:
        sys.stdout.write(text + "\n")
    log.info("\n%s", report.table())


def cmd_export_pr(args, rc: RunConfig) -> None:
    s = _read_scores(args.data or [rc.paths.data])
    write_pr_csv(pr_curve(s["score"], s["label"]), rc.paths.out)


HANDLERS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "calibrate": cmd_calibrate,
            "score": cmd_score, "eval": cmd_eval, "export-pr": cmd_export_pr}


def _threads() -> Optional[int]:
    raw = os.environ.get("ACVAE_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"ACVAE_THREADS must be a positive integer, got {raw!r}")
    return n


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("acvae: a subcommand is required: " + ", ".join(COMMANDS))
        threads = _threads()
        rc = resolve_config(args, _checkpoint_config(args) if args.command in ("calibrate", "score") else None)
        _require(args.command, args, rc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(exc, file=sys.stderr)
        print(parser.format_usage(), end="", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    log.info("command %s seed %d config %s", args.command, rc.seed, rc.to_json())
    try:
        with threadpool_limits(limits=threads):
            HANDLERS[args.command](args, rc)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())
