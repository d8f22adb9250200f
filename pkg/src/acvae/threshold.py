"""State-based dynamic threshold ``tau(z) = f_s(z) + eta``.

``f_s`` is an exact Gaussian-process regressor with an isotropic RBF kernel
plus observation noise, fitted on (posterior mean, anomaly score) pairs from
normal data. Hyperparameters are tuned by gradient ascent on the log marginal
likelihood; ``eta`` is a residual quantile chosen for a target false-positive
rate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import cho_solve
from scipy.spatial.distance import pdist

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class GprError(RuntimeError):
    pass


@dataclass
class ThresholdConfig:
    cap: int = 512
    target_fpr: float = 0.01
    eta: float | None = None  # fixed offset; calibrated when None
    jitter: float = 1e-8
    max_jitter: float = 1e-6
    opt_steps: int = 100
    step_size: float = 0.5
    min_variance: float = 1e-12

    def __post_init__(self):
        if self.cap < 1:
            raise ValueError("inducing cap must be >= 1")
        if not 0.0 < self.target_fpr < 1.0:
            raise ValueError("target_fpr must lie in (0, 1)")
        if self.opt_steps < 0:
            raise ValueError("opt_steps must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GprModel:
    inputs: np.ndarray  # (n, d)
    targets: np.ndarray  # centred, (n,)
    target_mean: float
    log_lengthscale: float
    log_signal_var: float
    log_noise_var: float
    chol: np.ndarray  # lower factor of K + (noise + jitter) I
    alpha: np.ndarray
    jitter: float = 0.0

    @property
    def hyper(self) -> np.ndarray:
        return np.array([self.log_lengthscale, self.log_signal_var, self.log_noise_var])

    def arrays(self) -> dict[str, np.ndarray]:
        """Everything needed to rebuild the model, as float64 arrays."""
        return {
            "gpr.inputs": self.inputs,
            "gpr.targets": self.targets,
            "gpr.scalars": np.array([self.target_mean, self.log_lengthscale, self.log_signal_var,
                                     self.log_noise_var, self.jitter]),
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "GprModel":
        mean, ll, ls, ln, jitter = (float(v) for v in arrays["gpr.scalars"])
        Z = np.asarray(arrays["gpr.inputs"], dtype=np.float64)
        y = np.asarray(arrays["gpr.targets"], dtype=np.float64)
        L = _factor(Z, np.array([ll, ls, ln]), jitter)
        return cls(Z, y, mean, ll, ls, ln, L, cho_solve((L, True), y), jitter)


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def rbf(a: np.ndarray, b: np.ndarray, log_lengthscale: float, log_signal_var: float) -> np.ndarray:
    return math.exp(log_signal_var) * np.exp(-0.5 * sq_dists(a, b) / math.exp(2 * log_lengthscale))


def _factor(Z: np.ndarray, hyper: np.ndarray, jitter: float) -> np.ndarray:
    K = rbf(Z, Z, hyper[0], hyper[1])
    K[np.diag_indices_from(K)] += math.exp(hyper[2]) + jitter
    return np.linalg.cholesky(K)


def _cholesky_escalating(Z, hyper, cfg: ThresholdConfig) -> tuple[np.ndarray, float]:
    scale = math.exp(hyper[1])
    jitter = 0.0
    while True:
        try:
            return _factor(Z, hyper, jitter), jitter
        except np.linalg.LinAlgError:
            jitter = cfg.jitter * scale if jitter == 0.0 else jitter * 10.0
            if jitter > cfg.max_jitter * scale * (1 + 1e-9):
                K = rbf(Z, Z, hyper[0], hyper[1])
                K[np.diag_indices_from(K)] += math.exp(hyper[2])
                raise GprError(f"Cholesky failed up to jitter {cfg.max_jitter * scale:.3g}; "
                               f"condition estimate {np.linalg.cond(K):.3g}") from None


def log_marginal_likelihood(Z, y, hyper, jitter: float = 0.0, with_grad: bool = False):
    """``log p(y | Z)`` and, optionally, its gradient in the log-hyperparameters.

    The gradient uses ``1/2 tr((a a^T - K^-1) dK)`` with ``a = K^-1 y``.
    """
    ll, ls, ln = hyper
    D2 = sq_dists(Z, Z)
    Kf = math.exp(ls) * np.exp(-0.5 * D2 / math.exp(2 * ll))
    K = Kf.copy()
    K[np.diag_indices_from(K)] += math.exp(ln) + jitter
    L = np.linalg.cholesky(K)
    a = cho_solve((L, True), y)
    n = len(y)
    value = -0.5 * y @ a - np.log(np.diag(L)).sum() - 0.5 * n * LOG_2PI
    if not with_grad:
        return value
    Kinv = cho_solve((L, True), np.eye(n))
    W = np.outer(a, a) - Kinv
    g = np.array([
        0.5 * np.sum(W * Kf * D2) / math.exp(2 * ll),
        0.5 * np.sum(W * Kf),
        0.5 * math.exp(ln) * np.trace(W),
    ])
    return value, g


def _median_distance(Z: np.ndarray) -> float:
    if len(Z) < 2:
        return 1.0
    d = np.median(pdist(Z))
    return float(d) if d > 0 else 1.0


def fit_gpr(states, scores, cfg: ThresholdConfig, rng) -> GprModel:
    """Fit on at most ``cfg.cap`` uniformly subsampled normal points."""
    Z = np.asarray(states, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    if Z.ndim != 2 or len(Z) != len(s) or len(s) == 0:
        raise ValueError("fit_gpr needs n >= 1 states (n, d) and n scores")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(s))):
        raise ValueError("fit_gpr inputs must be finite")
    if len(s) > cfg.cap:
        idx = np.sort(rng.choice(len(s), size=cfg.cap, replace=False))
        Z, s = Z[idx], s[idx]
    mean = float(s.mean())
    y = s - mean
    sf2 = max(float(y.var()), cfg.min_variance)
    hyper = np.array([math.log(_median_distance(Z)), math.log(sf2), math.log(0.1 * sf2)])
    # the noise floor keeps the optimiser away from singular Gram matrices
    floor = math.log(cfg.min_variance)

    L, jitter = _cholesky_escalating(Z, hyper, cfg)
    if np.any(y != 0):
        value, g = log_marginal_likelihood(Z, y, hyper, jitter, with_grad=True)
        step = cfg.step_size
        for _ in range(cfg.opt_steps):
            norm = np.linalg.norm(g)
            if norm < 1e-8 or step < 1e-8:
                break
            while step >= 1e-8:
                cand = hyper + step * g / norm
                cand[1:] = np.maximum(cand[1:], floor)
                try:
                    cv, cg = log_marginal_likelihood(Z, y, cand, jitter, with_grad=True)
                except np.linalg.LinAlgError:
                    cv = -np.inf
                if cv >= value:
                    hyper, value, g = cand, cv, cg
                    step *= 1.2
                    break
                step *= 0.5
        L, jitter = _cholesky_escalating(Z, hyper, cfg)
        log.info("gpr: n=%d lengthscale=%.4g signal=%.4g noise=%.4g lml=%.6g", len(y),
                 math.exp(hyper[0]), math.exp(hyper[1]), math.exp(hyper[2]), value)
    alpha = cho_solve((L, True), y)
    return GprModel(Z, y, mean, float(hyper[0]), float(hyper[1]), float(hyper[2]), L, alpha, jitter)


def predict_mean(gpr: GprModel, z):
    """Expected anomaly score at state(s) ``z``; a float for one state."""
    q = np.asarray(z, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    out = rbf(q, gpr.inputs, gpr.log_lengthscale, gpr.log_signal_var) @ gpr.alpha + gpr.target_mean
    return float(out[0]) if single else out


def nearest_rank_quantile(values, q: float) -> float:
    """Smallest value with at least a fraction ``q`` of the sample at or below it."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if len(v) == 0:
        raise ValueError("quantile of an empty sample")
    # rounding guards ceil() against products such as 0.99 * 100 = 99.00000000000001
    rank = max(1, int(math.ceil(round(q * len(v), 9))))
    return float(v[min(rank, len(v)) - 1])


def calibrate_eta(gpr: GprModel, val_states, val_scores, target_fpr: float) -> float:
    """Residual quantile so at most ``target_fpr`` of the validation set is flagged."""
    s = np.asarray(val_scores, dtype=np.float64)
    if len(s) == 0:
        raise ValueError("calibrate_eta needs a non-empty validation set")
    if not 0.0 <= target_fpr < 1.0:
        raise ValueError("target_fpr must lie in [0, 1)")
    residuals = s - predict_mean(gpr, np.atleast_2d(val_states))
    return nearest_rank_quantile(residuals, 1.0 - target_fpr)


@dataclass
class ThresholdModel:
    gpr: GprModel
    eta: float

    def tau(self, states) -> np.ndarray:
        return predict_mean(self.gpr, np.atleast_2d(states)) + self.eta

    def detect(self, scores, states) -> np.ndarray:
        return np.asarray(scores, dtype=np.float64) > self.tau(states)


def detect(score: float, z, gpr: GprModel, eta: float) -> bool:
    """Anomalous iff the score is strictly above ``tau``; equality is normal."""
    return bool(score > predict_mean(gpr, z) + eta)
