"""Monte-Carlo reconstruction-probability anomaly scores.

The score of a volume is the negated per-element Monte-Carlo estimate of
``E_q[log p(x | z)]``. Gaussian densities can exceed one, so "one minus the
reconstruction probability" has no literal meaning; the negated
log-likelihood keeps its ordering. The deterministic 3D-CAE scores by
per-element squared reconstruction error instead.

Every volume draws its latent noise from its own ``[seed, anchor]``
substream, so scores do not depend on ordering or chunking.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .model import AcvaeModel, decode, encode, gaussian_loglik
from .signature import VolumeDataset


@dataclass
class ScoringConfig:
    mc_samples: int = 16
    seed: int = 0
    chunk: int = 256

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.chunk < 1:
            raise ValueError("chunk must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ScoreSeries:
    anchors: np.ndarray
    scores: np.ndarray
    labels: Optional[np.ndarray] = None
    states: Optional[np.ndarray] = None  # posterior means, (n, d_z)

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.anchors) != len(self.scores):
            raise ValueError("anchors and scores differ in length")
        if self.labels is not None and len(self.labels) != len(self.anchors):
            raise ValueError("labels and anchors differ in length")
        if np.any(np.diff(self.anchors) <= 0):
            raise ValueError("anchors must be strictly increasing")

    def __len__(self) -> int:
        return len(self.anchors)


def _noise(cfg: ScoringConfig, anchor: int, d: int) -> np.ndarray:
    return ad.make_rng([cfg.seed, int(anchor)]).standard_normal((cfg.mc_samples, d))


def _loglik_batch(x: np.ndarray, mu: np.ndarray, log_var: np.ndarray, eps: np.ndarray,
                  model: AcvaeModel) -> np.ndarray:
    """Per-element MC log-likelihood for each volume; ``eps`` is (n, L, d)."""
    n, L, d = eps.shape
    z = (mu[:, None, :] + np.exp(0.5 * log_var)[:, None, :] * eps).reshape(n * L, d)
    recon = decode(z, model, "infer")
    xs = ad.Tensor(np.repeat(x, L, axis=0))
    ll = gaussian_loglik(xs, recon).data.reshape(n, L)
    return ll.mean(axis=1) / x[0].size


def reconstruction_loglik(volume, model: AcvaeModel, cfg: ScoringConfig, rng=None, anchor: int = 0) -> float:
    """``(1/L) sum_l log p(volume | z_l)`` divided by the voxel count.

    Noise comes from ``rng`` when given, otherwise from the ``[seed, anchor]``
    substream used by :func:`score_series`.
    """
    if not model.config.stochastic_enabled:
        raise ValueError("reconstruction_loglik needs a stochastic model")
    x = model.input_tensor(volume).data
    lg = encode(x, model, "infer")
    d = model.config.latent_dim
    eps = (ad.make_rng(rng).standard_normal((cfg.mc_samples, d)) if rng is not None
           else _noise(cfg, anchor, d))
    return float(_loglik_batch(x, lg.mu.data, lg.log_var.data, eps[None], model)[0])


def _squared_error(x: np.ndarray, mu: np.ndarray, model: AcvaeModel) -> np.ndarray:
    recon = decode(mu, model, "infer").mean.data
    return ((recon - x) ** 2).reshape(len(x), -1).mean(axis=1)


def anomaly_score(volume, model: AcvaeModel, cfg: ScoringConfig, rng=None, anchor: int = 0) -> float:
    """Higher means more anomalous."""
    if not model.config.stochastic_enabled:
        x = model.input_tensor(volume).data
        return float(_squared_error(x, encode(x, model, "infer").mu.data, model)[0])
    return -reconstruction_loglik(volume, model, cfg, rng, anchor)


def score_series(data: VolumeDataset, model: AcvaeModel, cfg: ScoringConfig) -> ScoreSeries:
    """Score every volume in order and keep the posterior means as states."""
    n, d = len(data), model.config.latent_dim
    scores = np.empty(n)
    states = np.empty((n, d))
    # the decoder sees chunk * L latent draws at once
    step = cfg.chunk if not model.config.stochastic_enabled else max(1, cfg.chunk // cfg.mc_samples)
    for start in range(0, n, step):
        sl = slice(start, min(start + step, n))
        x = model.input_tensor(data.volumes[sl]).data
        lg = encode(x, model, "infer")
        mu = lg.mu.data
        states[sl] = mu
        if model.config.stochastic_enabled:
            eps = np.stack([_noise(cfg, a, d) for a in data.anchors[sl]])
            scores[sl] = -_loglik_batch(x, mu, lg.log_var.data, eps, model)
        else:
            scores[sl] = _squared_error(x, mu, model)
    labels = None if data.labels is None else np.asarray(data.labels, dtype=bool)
    return ScoreSeries(data.anchors.copy(), scores, labels, states)
