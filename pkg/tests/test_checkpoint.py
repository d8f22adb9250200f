import json
import struct

import numpy as np
import pytest

import acvae.autodiff as ad
from acvae.checkpoint import (
    MAGIC,
    CheckpointError,
    ChecksumError,
    ShapeMismatchError,
    VersionError,
    decode,
    encode,
    load_checkpoint,
    save_checkpoint,
)
from acvae.model import AcvaeModel, ModelConfig
from acvae.scoring import ScoringConfig, score_series
from acvae.signature import VolumeDataset
from acvae.threshold import ThresholdConfig, ThresholdModel, fit_gpr

CFG = dict(m=6, k=2, latent_dim=3, enc_channels=(2, 3, 4, 4), reduction=2)


def model(dtype="float32", seed=0):
    mdl = AcvaeModel(ModelConfig(**CFG, dtype=dtype), ad.make_rng(seed))
    for b in mdl.bn.values():  # non-trivial running statistics
        b.running_mean = b.running_mean + 0.1
        b.running_var = b.running_var * 1.5
    return mdl


def volumes(n=10, seed=0):
    rng = np.random.default_rng(seed)
    return VolumeDataset(rng.uniform(0, 1, (n, 2, 6, 6, 1)), np.arange(50, 50 + 10 * n, 10), None, 30)


def threshold(mdl):
    s = score_series(volumes(30, 1), mdl, ScoringConfig(mc_samples=2))
    return ThresholdModel(fit_gpr(s.states, s.scores, ThresholdConfig(opt_steps=5), np.random.default_rng(0)), 0.125)


def rewrite_manifest(blob, edit):
    n = struct.unpack("<I", blob[len(MAGIC): len(MAGIC) + 4])[0]
    start = len(MAGIC) + 4
    manifest = json.loads(blob[start: start + n])
    edit(manifest)
    head = json.dumps(manifest, sort_keys=True).encode()
    return MAGIC + struct.pack("<I", len(head)) + head + blob[start + n:]


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_round_trip_is_bitwise(tmp_path, dtype):
    mdl = model(dtype)
    th = threshold(mdl)
    save_checkpoint(mdl, th, tmp_path / "m.ckpt", {"seed": 1})
    ck = load_checkpoint(tmp_path / "m.ckpt")
    for name, arr in mdl.state_dict().items():
        got = ck.model.state_dict()[name]
        assert got.dtype == arr.dtype and np.array_equal(got, arr), name
    cfg = ScoringConfig(mc_samples=4, seed=7)
    a, b = score_series(volumes(), mdl, cfg), score_series(volumes(), ck.model, cfg)
    assert np.array_equal(a.scores, b.scores) and np.array_equal(a.states, b.states)
    assert np.array_equal(th.tau(a.states), ck.threshold.tau(b.states))
    assert ck.threshold.eta == 0.125 and ck.run_config == {"seed": 1}


def test_same_inputs_same_bytes():
    assert encode(model(seed=2)) == encode(model(seed=2))
    assert encode(model(seed=2)) != encode(model(seed=3))


def test_layout_header_and_trailer():
    blob = encode(model())
    assert blob[:7] == b"ACVAE1\n"
    n = struct.unpack("<I", blob[7:11])[0]
    manifest = json.loads(blob[11: 11 + n])
    assert manifest["format_version"] == 1
    assert {e["dtype"] for e in manifest["tensors"]} == {"f32"}
    assert len(blob) == 11 + n + manifest["payload_bytes"] + 8
    first = manifest["tensors"][0]
    raw = blob[11 + n + first["offset"]:][: 4 * int(np.prod(first["shape"]))]
    np.testing.assert_array_equal(np.frombuffer(raw, "<f4").reshape(first["shape"]),
                                  model().state_dict()[first["name"]])


def test_truncated_file_fails_checksum():
    blob = encode(model())
    for cut in (len(blob) - 1, len(blob) // 2, 20):
        with pytest.raises(ChecksumError, match="checksum"):
            decode(blob[:cut])


def test_flipped_payload_byte_fails_checksum():
    blob = bytearray(encode(model()))
    blob[-20] ^= 0xFF
    with pytest.raises(ChecksumError):
        decode(bytes(blob))


def test_version_mismatch():
    blob = rewrite_manifest(encode(model()), lambda m: m.update(format_version=2))
    with pytest.raises(VersionError, match="version"):
        decode(blob)


def test_bad_magic():
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"NOTACK\n" + encode(model())[7:])


def test_edited_shape_names_tensor():
    def resize(m):
        e = next(t for t in m["tensors"] if t["name"] == "enc1.kernel")
        e["shape"][-1] += 1

    with pytest.raises(ShapeMismatchError, match="enc1.kernel"):
        decode(rewrite_manifest(encode(model()), resize))

    def permute(m):  # same element count, wrong layout for the model
        e = next(t for t in m["tensors"] if t["name"] == "enc1.kernel")
        e["shape"][-2], e["shape"][-1] = e["shape"][-1], e["shape"][-2]

    with pytest.raises(ShapeMismatchError, match="enc1.kernel"):
        decode(rewrite_manifest(encode(model()), permute))
