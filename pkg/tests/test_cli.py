import json
from pathlib import Path

import numpy as np
import pytest

from acvae import cli
from acvae.checkpoint import load_checkpoint

GOLDEN = Path(__file__).parent / "golden" / "scores.csv"
SMALL = {"seed": 3, "data": {"T": 8000, "n_attacks": 4}, "train": {"epochs": 2}, "mc_samples": 4}


def run(*argv):
    return cli.run([str(a) for a in argv])


def test_help_exits_zero(capsys):
    assert run("--help") == 0
    assert "synth" in capsys.readouterr().out
    assert run("train", "--help") == 0


def test_unknown_flag_names_it(capsys):
    assert run("train", "--bogus-flag", "1") == 1
    assert "--bogus-flag" in capsys.readouterr().err


def test_unknown_subcommand_and_missing_subcommand(capsys):
    assert run("frobnicate") == 1
    assert run() == 1


def test_missing_required_flag_is_named(capsys):
    assert run("train", "--checkpoint", "x.ckpt") == 1
    assert "--data" in capsys.readouterr().err


def test_bad_flag_values(tmp_path, capsys):
    assert run("calibrate", "--data", "d.csv", "--checkpoint", "c", "--target-fpr", "1.5") == 1
    assert "--target-fpr" in capsys.readouterr().err
    assert run("score", "--mc-samples", "0") == 1
    assert run("synth", "--seed", "-4", "--out", tmp_path / "x.csv") == 1


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"epochz": 1}}))
    assert run("synth", "--config", p, "--out", tmp_path / "x.csv") == 1
    assert "train.epochz" in capsys.readouterr().err


def test_threads_env(monkeypatch, tmp_path):
    monkeypatch.setenv("ACVAE_THREADS", "zero")
    assert run("synth", "--out", tmp_path / "x.csv") == 1
    monkeypatch.setenv("ACVAE_THREADS", "1")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"T": 500, "n_attacks": 1}}))
    assert run("synth", "--config", cfg, "--out", tmp_path / "x.csv") == 0


def test_missing_data_file_is_data_error(tmp_path):
    assert run("preprocess", "--data", tmp_path / "nope.csv", "--out", tmp_path / "p.csv") == 2


ROWS = ([120, 130, 140, 150], [0.5, 1.25, 0.75, -0.125], [0.75, 0.75, 0.75, 0.0], [False, True, False, False])


def test_score_csv_golden(tmp_path):
    out = tmp_path / "s.csv"
    cli.write_score_csv(out, *ROWS, [False, True, True, False])
    assert out.read_text() == GOLDEN.read_text()
    back = cli.read_score_csv(GOLDEN)
    assert back["anchor"].tolist() == ROWS[0] and back["score"].tolist() == ROWS[1]
    assert back["flag"].tolist() == ROWS[3] and back["label"].tolist() == [False, True, True, False]


def test_unlabelled_score_csv(tmp_path):
    out = tmp_path / "s.csv"
    cli.write_score_csv(out, *ROWS, None)
    assert out.read_text().splitlines()[1] == "120,0.5,0.75,0,"
    assert cli.read_score_csv(out)["label"] is None
    assert run("eval", "--data", out) == 2


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("e2e")
    cfg = d / "small.json"
    cfg.write_text(json.dumps(SMALL))
    codes = {
        "synth": run("synth", "--config", cfg, "--out", d / "raw.csv"),
        "preprocess": run("preprocess", "--config", cfg, "--data", d / "raw.csv", "--out", d / "prep.csv"),
        "train": run("train", "--config", cfg, "--data", d / "prep.csv", "--checkpoint", d / "m.ckpt"),
        "train2": run("train", "--config", cfg, "--data", d / "prep.csv", "--checkpoint", d / "m2.ckpt"),
    }
    (d / "trained.ckpt").write_bytes((d / "m.ckpt").read_bytes())
    codes["calibrate"] = run("calibrate", "--data", d / "prep.csv", "--checkpoint", d / "m.ckpt")
    codes["score"] = run("score", "--data", d / "prep.csv", "--checkpoint", d / "m.ckpt", "--out", d / "s.csv")
    codes["eval"] = run("eval", "--data", d / "s.csv", "--out", d / "report.json")
    codes["export-pr"] = run("export-pr", "--data", d / "s.csv", "--out", d / "pr.csv")
    return d, codes


def test_end_to_end_pipeline(pipeline):
    d, codes = pipeline
    assert all(c == 0 for c in codes.values()), codes
    assert (d / "raw.json").exists() and (d / "prep.csv.preprocess.json").exists()
    report = json.loads((d / "report.json").read_text())
    assert set(report) >= {"precision", "recall", "f1", "prauc", "confusion", "pr_points"}
    assert 0 <= report["prauc"] <= 1 and all(v >= 0 for v in report["confusion"].values())
    rows = (d / "s.csv").read_text().splitlines()
    assert rows[0] == "anchor,score,tau,flag,label" and len(rows) > 100
    assert sum(report["confusion"].values()) == len(rows) - 1
    assert (d / "pr.csv").read_text().startswith("recall,precision,threshold\n")


def test_checkpoint_contents_after_calibrate(pipeline):
    d, _ = pipeline
    ck = load_checkpoint(d / "m.ckpt")
    assert ck.threshold is not None and ck.run_config["seed"] == 3 and "paths" not in ck.run_config
    assert ck.preprocess["normal_steps"] > 0
    s = cli.read_score_csv(d / "s.csv")
    assert np.array_equal(s["flag"], s["score"] > s["tau"])


def test_same_seed_bitwise_identical_checkpoints(pipeline):
    d, _ = pipeline
    assert (d / "trained.ckpt").read_bytes() == (d / "m2.ckpt").read_bytes()


def test_rescoring_is_bitwise_reproducible(pipeline):
    d, _ = pipeline
    assert run("score", "--data", d / "prep.csv", "--checkpoint", d / "m.ckpt", "--out", d / "s2.csv") == 0
    assert (d / "s2.csv").read_bytes() == (d / "s.csv").read_bytes()


def test_score_without_threshold_and_corrupt_checkpoint(pipeline, capsys):
    d, _ = pipeline
    assert run("score", "--data", d / "prep.csv", "--checkpoint", d / "trained.ckpt", "--out", d / "x.csv") == 2
    assert "calibrate" in capsys.readouterr().err
    blob = (d / "m.ckpt").read_bytes()
    (d / "cut.ckpt").write_bytes(blob[: len(blob) - 100])
    assert run("score", "--config", d / "small.json", "--data", d / "prep.csv", "--checkpoint", d / "cut.ckpt",
               "--out", d / "x.csv") == 2
    assert "checksum" in capsys.readouterr().err
