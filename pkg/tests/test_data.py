import json

import numpy as np
import pytest

from acvae.data import (
    Attack,
    CsvSchema,
    DataError,
    SynthConfig,
    apply_preprocess,
    benchmark_config,
    fit_preprocess,
    load_csv,
    split_normal,
    synth_generate,
    synth_mixing,
    write_csv,
    write_manifest,
)
from acvae.signature import TimeSeriesMatrix


def test_load_small_csv(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("a,b,Normal/Attack\n1.5,2,Normal\n3,4.25,Attack\n")
    s = load_csv(p)
    assert s.channels == ["a", "b"]
    np.testing.assert_array_equal(s.values, [[1.5, 3.0], [2.0, 4.25]])
    np.testing.assert_array_equal(s.labels, [False, True])


def test_missing_label_column(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("x,y,z\n1,2,3\n4,5,6\n")
    s = load_csv(p)
    assert s.labels is None
    assert s.values.shape == (3, 2)


def test_swat_style_header(tmp_path):
    p = tmp_path / "swat.csv"
    p.write_text(" Timestamp,FIT101,LIT101,Normal/Attack\n"
                 " 22/12/2015 4:00:00 PM,0.5,124.3,Normal\n"
                 " 22/12/2015 4:00:01 PM,0.6,124.4,A ttack\n")
    s = load_csv(p)
    assert s.channels == ["FIT101", "LIT101"]
    assert s.timestamps[0].startswith("22/12/2015")
    np.testing.assert_array_equal(s.labels, [False, True])


def test_ragged_and_bad_numbers(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n3\n")
    with pytest.raises(DataError, match="row 3"):
        load_csv(p)
    p.write_text("a,b\n1,2\n3,x\n")
    with pytest.raises(DataError, match="row 3"):
        load_csv(p)


def test_csv_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    vals = np.round(rng.uniform(-10, 10, size=(3, 50)), 3)
    s = TimeSeriesMatrix(vals, ["a", "b", "c"], rng.random(50) < 0.2)
    write_csv(s, tmp_path / "r.csv")
    back = load_csv(tmp_path / "r.csv")
    np.testing.assert_array_equal(back.values, s.values)
    np.testing.assert_array_equal(back.labels, s.labels)
    # full-precision doubles survive too
    s2 = TimeSeriesMatrix(rng.normal(size=(2, 20)), ["a", "b"])
    write_csv(s2, tmp_path / "r2.csv")
    np.testing.assert_array_equal(load_csv(tmp_path / "r2.csv").values, s2.values)


def test_explicit_schema(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("t,a,flag\n0,1,0\n1,2,1\n")
    s = load_csv(p, CsvSchema(label_column="flag", timestamp_column="t"))
    assert s.channels == ["a"]
    np.testing.assert_array_equal(s.labels, [False, True])


def _train():
    vals = np.array([[1.0, 2.0, 3.0, 4.0], [5.0, 5.0, 5.0, 5.0], [0.0, 10.0, 5.0, 2.0]])
    return TimeSeriesMatrix(vals, ["a", "const", "b"])


def test_preprocess_drops_constant_feature():
    st = fit_preprocess(_train())
    assert st.kept_channels == ["a", "b"]
    out = apply_preprocess(st, _train())
    np.testing.assert_array_equal(out.values.min(axis=1), [0, 0])
    np.testing.assert_array_equal(out.values.max(axis=1), [1, 1])


def test_preprocess_identity_mask_and_no_clipping():
    s = TimeSeriesMatrix(np.array([[0.0, 10.0], [1.0, 3.0]]), ["x", "y"])
    st = fit_preprocess(s)
    assert st.keep.all()
    test = TimeSeriesMatrix(np.array([[12.0], [2.0]]), ["x", "y"])
    assert apply_preprocess(st, test).values[0, 0] == pytest.approx(1.2, abs=1e-15)


def test_preprocess_matches_elementwise_oracle():
    rng = np.random.default_rng(1)
    train = TimeSeriesMatrix(rng.normal(size=(4, 30)), list("abcd"))
    test = TimeSeriesMatrix(rng.normal(size=(4, 10)), list("abcd"))
    st = fit_preprocess(train)
    snapshot = (st.keep.copy(), st.minimum.copy(), st.maximum.copy())
    out = apply_preprocess(st, test).values
    for i in range(4):
        lo, hi = min(train.values[i]), max(train.values[i])
        for t in range(10):
            assert abs(out[i, t] - (test.values[i, t] - lo) / (hi - lo)) <= 1e-15
    np.testing.assert_array_equal(st.keep, snapshot[0])
    np.testing.assert_array_equal(st.minimum, snapshot[1])
    np.testing.assert_array_equal(st.maximum, snapshot[2])


def test_preprocess_errors():
    with pytest.raises(DataError, match="constant"):
        fit_preprocess(TimeSeriesMatrix(np.ones((2, 5)), ["a", "b"]))
    st = fit_preprocess(_train())
    with pytest.raises(DataError, match="unknown"):
        apply_preprocess(st, TimeSeriesMatrix(np.ones((4, 2)), ["a", "const", "b", "zzz"]))


def test_split_fractions_and_counts():
    s = TimeSeriesMatrix(np.arange(1000.0)[None], ["a"])
    tr, v1, v2 = split_normal(s, (0.7, 0.2, 0.1))
    assert (tr.T, v1.T, v2.T) == (700, 200, 100)
    np.testing.assert_array_equal(np.concatenate([tr.values, v1.values, v2.values], axis=1), s.values)
    tr, v1, v2 = split_normal(s, (10, 20, 30))
    assert (tr.T, v1.T, v2.T) == (10, 20, 30)
    np.testing.assert_array_equal(np.concatenate([tr.values, v1.values, v2.values], axis=1), s.values[:, :60])
    with pytest.raises(DataError):
        split_normal(s, (900, 100, 1))


def test_synth_no_attacks_and_determinism():
    cfg = SynthConfig(T=3000, seed=5)
    a, b = synth_generate(cfg), synth_generate(cfg)
    assert not a.labels.any()
    assert a.values.tobytes() == b.values.tobytes()
    assert a.values.shape == (8, 3000)


def test_synth_prefix_stable():
    short = synth_generate(SynthConfig(T=2000, seed=9)).values
    long = synth_generate(SynthConfig(T=5000, seed=9)).values
    np.testing.assert_array_equal(long[:, :2000], short)


def test_stuck_at_variance():
    cfg = SynthConfig(T=4000, seed=1, attacks=[Attack("stuck_at", [2], 1000, 300)])
    s = synth_generate(cfg)
    inside = s.values[2, 1000:1300]
    assert np.ptp(inside) == 0.0  # constant, so variance is zero up to rounding in var()
    assert s.values[2, :1000].var() > 0 and s.values[2, 1300:].var() > 0


def test_attack_kinds_and_labels():
    base = synth_generate(SynthConfig(T=3000, seed=2)).values
    attacks = [Attack("bias", [0], 100, 50, 0.3), Attack("drift", [1], 400, 100, 0.5),
               Attack("spoof_swap", [2, 3], 700, 60), Attack("stuck_at", [4], 900, 10, 0.42)]
    s = synth_generate(SynthConfig(T=3000, seed=2, attacks=attacks))
    np.testing.assert_allclose(s.values[0, 100:150], base[0, 100:150] + 0.3, rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.values[1, 499], base[1, 499] + 0.5, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(s.values[2, 700:760], base[3, 700:760])
    np.testing.assert_array_equal(s.values[3, 700:760], base[2, 700:760])
    np.testing.assert_array_equal(s.values[4, 900:910], 0.42)
    assert s.labels.sum() == 50 + 100 + 60 + 10
    np.testing.assert_array_equal(s.values[:, 2000:], base[:, 2000:])


def test_overlapping_attacks_rejected():
    cfg = SynthConfig(T=1000, attacks=[Attack("bias", [1], 100, 50, 0.1), Attack("drift", [1], 120, 10, 0.2)])
    with pytest.raises(ValueError, match="overlapping"):
        synth_generate(cfg)


def test_benchmark_label_fraction_exact():
    for seed in range(1, 6):
        cfg = benchmark_config(seed)
        s = synth_generate(cfg)
        assert len(cfg.attacks) == 8
        assert s.labels.mean() == sum(a.duration for a in cfg.attacks) / cfg.T == 0.05
        assert not s.labels[: cfg.T // 2].any()


def test_every_channel_pair_shares_a_driver():
    for seed in range(5):
        _, _, weights = synth_mixing(SynthConfig(seed=seed))
        assert np.all(weights >= 0)
        shared = (weights > 0).astype(int) @ (weights > 0).astype(int).T
        assert np.all(shared >= 1)


def test_manifest(tmp_path):
    cfg = benchmark_config(2)
    path = write_manifest(cfg, tmp_path / "bench.csv")
    back = SynthConfig.from_dict(json.loads(path.read_text()))
    assert back == cfg
