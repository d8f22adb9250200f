"""Attention-based 3D convolutional VAE over correlation-matrix volumes.

Encoder: four strided ``conv3d -> batch norm -> ReLU`` blocks with a CBAM
module after each of the first three, then one dense layer emitting the
posterior mean and log-variance. Decoder: a dense layer lifting ``z`` back to
the encoder's last feature shape, four mirrored transposed convolutions and a
stride-1 transposed projection to two output channels (per-voxel mean and
log-variance of a diagonal Gaussian).

``attention_enabled=False`` gives the plain 3D-CVAE and
``stochastic_enabled=False`` the deterministic 3D-CAE.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ModelConfig:
    m: int
    k: int
    latent_dim: int = 100
    enc_channels: tuple[int, ...] = (32, 64, 128, 256)
    enc_strides: tuple[tuple[int, int, int], ...] = ((1, 2, 2), (1, 2, 2), (2, 2, 2), (2, 2, 2))
    kernel: tuple[int, int, int] = (3, 3, 3)
    attention_enabled: bool = True
    stochastic_enabled: bool = True
    reduction: int = 8
    spatial_kernel: tuple[int, int, int] = (3, 3, 3)
    logvar_min: float = -10.0
    logvar_max: float = 10.0
    bn_decay: float = 0.9
    bn_epsilon: float = 1e-3
    dtype: str = "float64"

    def __post_init__(self):
        self.enc_channels = tuple(int(c) for c in self.enc_channels)
        self.enc_strides = tuple(tuple(int(s) for s in st) for st in self.enc_strides)
        self.kernel = tuple(self.kernel)
        self.spatial_kernel = tuple(self.spatial_kernel)
        if len(self.enc_channels) != 4 or len(self.enc_strides) != 4:
            raise ValueError("the encoder has exactly four convolution layers")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.m < 1 or self.k < 1:
            raise ValueError("m and k must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if not self.logvar_min < self.logvar_max:
            raise ValueError("logvar_min must be below logvar_max")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def variant(self) -> str:
        if not self.stochastic_enabled:
            return "3D-CAE"
        return "aCVAE" if self.attention_enabled else "3D-CVAE"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        d["enc_strides"] = [list(s) for s in self.enc_strides]
        d["kernel"] = list(self.kernel)
        d["spatial_kernel"] = list(self.spatial_kernel)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def encoder_shapes(self) -> list[tuple[int, int, int]]:
        """Spatial extent entering each encoder layer, plus the final one."""
        shapes = [(self.k, self.m, self.m)]
        for st in self.enc_strides:
            out, _ = ad.conv_output_shape(shapes[-1], self.kernel, st, "same")
            shapes.append(tuple(out))
        return shapes

    def decoder_channels(self) -> list[int]:
        c = self.enc_channels
        return [c[2], c[1], c[0], c[0], 2]


@dataclass
class CbamParams:
    w1: Tensor  # (C, hidden)
    b1: Tensor
    w2: Tensor  # (hidden, C)
    b2: Tensor
    ws: Tensor  # spatial conv kernel (kd, kh, kw, 2, 1)
    bs: Tensor

    def named(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2, "ws": self.ws, "bs": self.bs}

    @classmethod
    def create(cls, channels: int, hidden: int, spatial_kernel, rng, dtype=np.float64) -> "CbamParams":
        return cls(
            ad.glorot_uniform((channels, hidden), rng, dtype),
            Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
            ad.glorot_uniform((hidden, channels), rng, dtype),
            Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            ad.glorot_uniform(tuple(spatial_kernel) + (2, 1), rng, dtype),
            Tensor(np.zeros(1, dtype=dtype), requires_grad=True),
        )


def cbam(x: Tensor, p: CbamParams, return_maps: bool = False):
    """Channel attention then spatio-temporal attention, each a sigmoid gate.

    Accepts ``(D, H, W, C)`` or ``(N, D, H, W, C)``.
    """
    single = x.ndim == 4
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    n, c = x.shape[0], x.shape[-1]
    if p.w1.shape[0] != c:
        raise ad.ShapeError(f"cbam: {c} channels but parameters expect {p.w1.shape[0]}")

    def mlp(v):
        return ad.dense(ad.relu(ad.dense(v, p.w1, p.b1)), p.w2, p.b2)

    avg = ad.reshape(ad.global_pool(x, "avg", "spatial"), (n, c))
    mx = ad.reshape(ad.global_pool(x, "max", "spatial"), (n, c))
    channel_map = ad.reshape(ad.sigmoid(ad.add(mlp(avg), mlp(mx))), (n, 1, 1, 1, c))
    refined = ad.mul(x, channel_map)
    pooled = ad.concat([ad.global_pool(refined, "avg", "channel"),
                        ad.global_pool(refined, "max", "channel")], axis=-1)
    spatial_map = ad.sigmoid(ad.conv3d(pooled, p.ws, 1, "same", bias=p.bs))
    out = ad.mul(refined, spatial_map)
    if single:
        out = ad.reshape(out, out.shape[1:])
    if return_maps:
        return out, channel_map, spatial_map
    return out


@dataclass
class LatentGaussian:
    mu: Tensor  # (N, d_z)
    log_var: Tensor


@dataclass
class ReconGaussian:
    mean: Tensor  # (N, k, m, m, 1)
    log_var: Tensor


@dataclass
class LossBreakdown:
    """Batch-averaged terms; ``elbo`` is computed as ``recon_loglik - kl``."""

    elbo: Tensor
    kl: Tensor
    recon_loglik: Tensor

    def values(self) -> dict[str, float]:
        return {"elbo": self.elbo.item(), "kl": self.kl.item(), "recon_loglik": self.recon_loglik.item()}


class AcvaeModel:
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        dt = config.np_dtype
        cfg = config
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        self.cbams: list[CbamParams] = []
        shapes = cfg.encoder_shapes()
        c_in = 1
        for i, c_out in enumerate(cfg.enc_channels):
            self.params[f"enc{i}.kernel"] = ad.glorot_uniform(cfg.kernel + (c_in, c_out), rng, dt)
            self.bn[f"enc{i}.bn"] = BatchNormState.create(c_out, cfg.bn_decay, cfg.bn_epsilon, dt)
            c_in = c_out
        for i in range(3):
            c = cfg.enc_channels[i]
            self.cbams.append(CbamParams.create(c, max(1, c // cfg.reduction), cfg.spatial_kernel, rng, dt))
        flat = int(np.prod(shapes[-1])) * cfg.enc_channels[-1]
        d = cfg.latent_dim
        self.params["enc_dense.w"] = ad.glorot_uniform((flat, 2 * d), rng, dt)
        self.params["enc_dense.b"] = Tensor(np.zeros(2 * d, dtype=dt), requires_grad=True)
        self.params["dec_dense.w"] = ad.glorot_uniform((d, flat), rng, dt)
        self.params["dec_dense.b"] = Tensor(np.zeros(flat, dtype=dt), requires_grad=True)
        c_in = cfg.enc_channels[-1]
        for i, c_out in enumerate(cfg.decoder_channels()):
            # transposed kernels are stored as the forward kernel they invert: (.., c_out, c_in)
            self.params[f"dec{i}.kernel"] = ad.glorot_uniform(cfg.kernel + (c_out, c_in), rng, dt)
            if i < 4:
                self.bn[f"dec{i}.bn"] = BatchNormState.create(c_out, cfg.bn_decay, cfg.bn_epsilon, dt)
            c_in = c_out
        self.params["dec4.bias"] = Tensor(np.zeros(2, dtype=dt), requires_grad=True)
        if cfg.attention_enabled:
            for i, cb in enumerate(self.cbams):
                for name, t in cb.named().items():
                    self.params[f"cbam{i}.{name}"] = t
        else:
            # keep CBAM tensors out of the optimiser and checkpoints when unused
            self.cbams = []

    # -- parameter access -------------------------------------------------
    def parameters(self) -> list[Tensor]:
        out = list(self.params.values())
        for name in sorted(self.bn):
            out.extend([self.bn[name].gamma, self.bn[name].beta])
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        """Every tensor needed to reproduce the model, keyed by stable names."""
        state = {name: t.data for name, t in self.params.items()}
        for name in sorted(self.bn):
            b = self.bn[name]
            state[f"{name}.gamma"] = b.gamma.data
            state[f"{name}.beta"] = b.beta.data
            state[f"{name}.running_mean"] = b.running_mean
            state[f"{name}.running_var"] = b.running_var
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        if missing or extra:
            raise KeyError(f"state mismatch; missing={missing} unexpected={extra}")
        for name, arr in state.items():
            if arr.shape != expected[name].shape:
                raise ValueError(f"tensor {name!r}: shape {arr.shape} != expected {expected[name].shape}")
        dt = self.config.np_dtype
        for name, t in self.params.items():
            t.data = np.array(state[name], dtype=dt)
        for name, b in self.bn.items():
            b.gamma.data = np.array(state[f"{name}.gamma"], dtype=dt)
            b.beta.data = np.array(state[f"{name}.beta"], dtype=dt)
            b.running_mean = np.array(state[f"{name}.running_mean"], dtype=dt)
            b.running_var = np.array(state[f"{name}.running_var"], dtype=dt)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_dict().items()}

    def input_tensor(self, volumes) -> Tensor:
        arr = volumes.data if isinstance(volumes, Tensor) else np.asarray(volumes)
        arr = arr.astype(self.config.np_dtype, copy=False)
        if arr.ndim == 4:
            arr = arr[None]
        expected = (self.config.k, self.config.m, self.config.m, 1)
        if arr.shape[1:] != expected:
            raise ad.ShapeError(f"volume shape {arr.shape[1:]} does not match model input {expected}")
        return Tensor(arr)


def _block(h: Tensor, bn: BatchNormState, mode: str) -> Tensor:
    return ad.relu(ad.batch_norm(h, bn, mode))


def encode(volume, model: AcvaeModel, mode: str = "infer") -> LatentGaussian:
    """Posterior parameters for one volume ``(k, m, m, 1)`` or a batch of them."""
    cfg = model.config
    h = model.input_tensor(volume)
    for i in range(4):
        h = ad.conv3d(h, model.params[f"enc{i}.kernel"], cfg.enc_strides[i], "same")
        h = _block(h, model.bn[f"enc{i}.bn"], mode)
        if cfg.attention_enabled and i < 3:
            h = cbam(h, model.cbams[i])
    n = h.shape[0]
    out = ad.dense(ad.reshape(h, (n, -1)), model.params["enc_dense.w"], model.params["enc_dense.b"])
    d = cfg.latent_dim
    mu = out[:, :d]
    log_var = ad.clip(out[:, d:], cfg.logvar_min, cfg.logvar_max)
    return LatentGaussian(mu, log_var)


def reparameterize(lg: LatentGaussian, rng: Optional[np.random.Generator] = None,
                   eps: Optional[np.ndarray] = None) -> Tensor:
    if eps is None:
        eps = rng.standard_normal(lg.mu.shape)
    eps = Tensor(np.asarray(eps, dtype=lg.mu.dtype))
    return ad.add(lg.mu, ad.mul(ad.exp(ad.mul(lg.log_var, 0.5)), eps))


def decode(z, model: AcvaeModel, mode: str = "infer") -> ReconGaussian:
    cfg = model.config
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=cfg.np_dtype))
    if z.ndim == 1:
        z = ad.reshape(z, (1, -1))
    if z.shape[1] != cfg.latent_dim:
        raise ad.ShapeError(f"latent vector has {z.shape[1]} dims, model expects {cfg.latent_dim}")
    n = z.shape[0]
    shapes = cfg.encoder_shapes()
    h = ad.relu(ad.dense(z, model.params["dec_dense.w"], model.params["dec_dense.b"]))
    h = ad.reshape(h, (n,) + shapes[-1] + (cfg.enc_channels[-1],))
    for i in range(4):
        layer = 3 - i
        h = ad.conv3d_transposed(h, model.params[f"dec{i}.kernel"], cfg.enc_strides[layer], "same",
                                 output_shape=shapes[layer])
        h = _block(h, model.bn[f"dec{i}.bn"], mode)
    out = ad.conv3d_transposed(h, model.params["dec4.kernel"], 1, "same", output_shape=shapes[0],
                               bias=model.params["dec4.bias"])
    mean = out[..., 0:1]
    log_var = ad.clip(out[..., 1:2], cfg.logvar_min, cfg.logvar_max)
    return ReconGaussian(mean, log_var)


def kl_divergence(lg: LatentGaussian) -> Tensor:
    """Per-sample KL(q || N(0, I)), shape (N,)."""
    terms = ad.sub(ad.add(ad.square(lg.mu), ad.exp(lg.log_var)), ad.add(lg.log_var, 1.0))
    return ad.mul(ad.reduce_sum(terms, axis=1), 0.5)


def gaussian_loglik(x: Tensor, recon: ReconGaussian) -> Tensor:
    """Per-sample sum over voxels of log N(x; mean, exp(log_var)), shape (N,)."""
    diff = ad.sub(x, recon.mean)
    quad = ad.mul(ad.square(diff), ad.exp(ad.neg(recon.log_var)))
    per_voxel = ad.mul(ad.add(ad.add(quad, recon.log_var), LOG_2PI), -0.5)
    n = x.shape[0]
    return ad.reduce_sum(ad.reshape(per_voxel, (n, -1)), axis=1)


def elbo(volume, model: AcvaeModel, rng: Optional[np.random.Generator] = None, n_mc: int = 1,
         mode: str = "train", eps: Optional[Sequence[np.ndarray]] = None) -> LossBreakdown:
    """Batch-mean ELBO with analytic KL and an ``n_mc``-sample reconstruction term.

    ``eps`` pins the standard-normal draws (one array per MC sample).
    """
    if not model.config.stochastic_enabled:
        raise ValueError("elbo() needs a stochastic model; use deterministic_loss() for the 3D-CAE")
    x = model.input_tensor(volume)
    lg = encode(x, model, mode)
    kl = kl_divergence(lg)
    recon = None
    for s in range(n_mc):
        z = reparameterize(lg, rng, None if eps is None else eps[s])
        ll = gaussian_loglik(x, decode(z, model, mode))
        recon = ll if recon is None else ad.add(recon, ll)
    recon = ad.mul(recon, 1.0 / n_mc)
    recon_mean = ad.mean(recon)
    kl_mean = ad.mean(kl)
    return LossBreakdown(ad.sub(recon_mean, kl_mean), kl_mean, recon_mean)


def deterministic_loss(volume, model: AcvaeModel, mode: str = "train") -> Tensor:
    """Mean squared error of the decoded mean with ``z = mu`` (no sampling, no KL)."""
    x = model.input_tensor(volume)
    lg = encode(x, model, mode)
    recon = decode(lg.mu, model, mode)
    return ad.mean(ad.square(ad.sub(recon.mean, x)))
