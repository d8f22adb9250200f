"""Binary checkpoint container for a trained model and its threshold.

Layout::

    b"ACVAE1\\n"
    u32 little-endian manifest length
    manifest (UTF-8 JSON): format version, run config, model config,
        optional threshold/preprocess metadata, tensor directory
        [{name, dtype "f32"|"f64", shape, offset}], payload byte count
    tensor payloads, row-major little-endian, back to back
    8-byte BLAKE2b digest of the payload region

Nothing time- or path-dependent is written, so equal inputs give equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .model import AcvaeModel, ModelConfig
from .threshold import GprModel, ThresholdModel

MAGIC = b"ACVAE1\n"
FORMAT_VERSION = 1
DIGEST_SIZE = 8
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: AcvaeModel
    threshold: Optional[ThresholdModel] = None
    run_config: dict = field(default_factory=dict)
    preprocess: Optional[dict] = None


def _digest(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=DIGEST_SIZE).digest()


def _code(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")


def encode(model: AcvaeModel, threshold: Optional[ThresholdModel] = None, run_config: Optional[dict] = None,
           preprocess: Optional[dict] = None) -> bytes:
    tensors = dict(model.state_dict())
    if threshold is not None:
        tensors.update({k: np.asarray(v, dtype=np.float64) for k, v in threshold.gpr.arrays().items()})
    directory, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        code = _code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        directory.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "run_config": run_config or {},
        "model_config": model.config.to_dict(),
        "threshold": None if threshold is None else {"eta": float(threshold.eta)},
        "preprocess": preprocess,
        "tensors": directory,
        "payload_bytes": len(payload),
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + payload + _digest(payload)


def save_checkpoint(model: AcvaeModel, threshold: Optional[ThresholdModel], path, run_config: Optional[dict] = None,
                    preprocess: Optional[dict] = None) -> Path:
    path = Path(path)
    blob = encode(model, threshold, run_config, preprocess)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return path


def read_manifest(blob: bytes) -> tuple[dict, int]:
    """Parsed manifest and the byte offset where payloads start."""
    if not blob.startswith(MAGIC):
        raise CheckpointError("not an ACVAE checkpoint (bad magic)")
    start = len(MAGIC) + 4
    if len(blob) < start:
        raise ChecksumError("checksum mismatch: file truncated inside the header")
    (n,) = struct.unpack("<I", blob[len(MAGIC): start])
    if len(blob) < start + n:
        raise ChecksumError("checksum mismatch: file truncated inside the manifest")
    try:
        manifest = json.loads(blob[start: start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version!r} is not supported (expected {FORMAT_VERSION})")
    return manifest, start + n


def decode(blob: bytes) -> Checkpoint:
    manifest, start = read_manifest(blob)
    size = int(manifest["payload_bytes"])
    if len(blob) != start + size + DIGEST_SIZE:
        raise ChecksumError(f"checksum mismatch: expected {start + size + DIGEST_SIZE} bytes, found {len(blob)}")
    payload = blob[start: start + size]
    if _digest(payload) != blob[start + size:]:
        raise ChecksumError("checksum mismatch: payload digest does not match")

    entries = sorted(manifest["tensors"], key=lambda e: e["offset"])
    tensors: dict[str, np.ndarray] = {}
    for i, e in enumerate(entries):
        name = e["name"]
        dt = _DTYPES.get(e["dtype"])
        if dt is None:
            raise CheckpointError(f"tensor {name!r}: unknown dtype {e['dtype']!r}")
        shape = tuple(int(s) for s in e["shape"])
        stop = entries[i + 1]["offset"] if i + 1 < len(entries) else size
        need = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if need != stop - e["offset"] or e["offset"] < 0:
            raise ShapeMismatchError(f"tensor {name!r}: manifest shape {list(shape)} needs {need} bytes "
                                     f"but its payload holds {stop - e['offset']}")
        arr = np.frombuffer(payload, dtype=dt, count=need // dt.itemsize, offset=e["offset"])
        tensors[name] = arr.reshape(shape).astype(dt.newbyteorder("="))

    config = ModelConfig.from_dict(manifest["model_config"])
    model = AcvaeModel(config, ad.make_rng(0))
    gpr_arrays = {k: tensors.pop(k) for k in list(tensors) if k.startswith("gpr.")}
    try:
        model.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise ShapeMismatchError(str(exc)) from None
    threshold = None
    if manifest.get("threshold") is not None:
        try:
            gpr = GprModel.from_arrays(gpr_arrays)
        except KeyError as exc:
            raise CheckpointError(f"threshold tensor {exc} missing") from None
        threshold = ThresholdModel(gpr, float(manifest["threshold"]["eta"]))
    return Checkpoint(model, threshold, manifest.get("run_config", {}), manifest.get("preprocess"))


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
