"""Minibatch Adam training on -ELBO (or MSE for the 3D-CAE) with early stopping."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .model import AcvaeModel, deterministic_loss, elbo

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when the objective stops being finite."""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 5
    n_mc: int = 1
    val_batch_size: int = 256

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1 or self.n_mc < 1:
            raise ValueError(f"invalid training config {self}")

    def to_dict(self) -> dict:
        return asdict(self)


class EarlyStopping:
    """Track a minimised validation objective.

    ``update`` returns True once ``patience`` consecutive epochs fail to beat
    the best value strictly.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch: int | None = None
        self.bad_epochs = 0

    def update(self, value: float, epoch: int) -> bool:
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def val(self) -> list[float]:
        return [e["val"] for e in self.epochs]


def objective(model: AcvaeModel, batch: np.ndarray, rng, mode: str, n_mc: int = 1) -> ad.Tensor:
    """Scalar to minimise: -ELBO per volume (batch mean) or the CAE's MSE."""
    if model.config.stochastic_enabled:
        return ad.neg(elbo(batch, model, rng, n_mc=n_mc, mode=mode).elbo)
    return deterministic_loss(batch, model, mode)


def evaluate(model: AcvaeModel, volumes: np.ndarray, seed: int, batch_size: int = 256) -> float:
    """Validation objective in inference mode with a fixed noise stream."""
    rng = ad.make_rng([seed, 0x5EED])
    total, n = 0.0, len(volumes)
    for start in range(0, n, batch_size):
        chunk = volumes[start:start + batch_size]
        total += objective(model, chunk, rng, "infer").item() * len(chunk)
    return total / n


def train(train_volumes: np.ndarray, val_volumes: np.ndarray, model: AcvaeModel, cfg: TrainConfig,
          seed: int) -> tuple[AcvaeModel, History]:
    """Train in place and restore the parameters of the best validation epoch.

    Epoch 0 is the untrained model; it is a valid "best" if training never helps.
    """
    if len(train_volumes) == 0 or len(val_volumes) == 0:
        raise ValueError("training and validation sets must be non-empty")
    rng = ad.make_rng([seed, 0x7A1])
    params = model.parameters()
    opt = ad.AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    stopper = EarlyStopping(cfg.patience)
    history = History()

    val0 = evaluate(model, val_volumes, seed, cfg.val_batch_size)
    history.epochs.append({"epoch": 0, "train": float("nan"), "val": val0})
    stopper.update(val0, 0)
    best_state = model.snapshot()
    log.info("epoch 0: val %.6g", val0)

    n = len(train_volumes)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        running, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = objective(model, train_volumes[idx], rng, "train", cfg.n_mc)
            value = loss.item()
            grads = ad.grad(loss, params)
            step += 1
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingError(f"non-finite loss or gradient at epoch {epoch}, step {step} "
                                    f"(loss={value})")
            ad.adam_step(params, grads, opt)
            running += value * len(idx)
            seen += len(idx)
        val = evaluate(model, val_volumes, seed, cfg.val_batch_size)
        history.epochs.append({"epoch": epoch, "train": running / seen, "val": val})
        log.info("epoch %d: train %.6g val %.6g", epoch, running / seen, val)
        stop = stopper.update(val, epoch)
        if stopper.best_epoch == epoch:
            best_state = model.snapshot()
        if stop:
            history.stopped_early = True
            break
    model.load_state_dict(best_state)
    history.best_epoch = stopper.best_epoch or 0
    return model, history
