"""Correlation-matrix volumes built from multivariate series.

Anchor convention: an anchor ``t`` is the number of timesteps observed so far,
i.e. the window ending at ``t`` covers the 0-based rows ``[t - w, t)``. The
smallest valid anchor for a depth-``k`` volume is ``(k - 1) * stride + w``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass
class TimeSeriesMatrix:
    """``values`` is channels x timesteps (m x T)."""

    values: np.ndarray
    channels: list[str]
    labels: Optional[np.ndarray] = None
    timestamps: Optional[list[str]] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"values must be m x T, got shape {self.values.shape}")
        if len(self.channels) != self.values.shape[0]:
            raise ValueError(f"{len(self.channels)} channel names for {self.values.shape[0]} channels")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=bool)
            if self.labels.shape != (self.values.shape[1],):
                raise ValueError(f"label length {self.labels.shape} != T={self.values.shape[1]}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("series contains missing or non-finite values")

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "TimeSeriesMatrix":
        return TimeSeriesMatrix(
            self.values[:, start:stop].copy(),
            list(self.channels),
            None if self.labels is None else self.labels[start:stop].copy(),
            None if self.timestamps is None else self.timestamps[start:stop],
        )


@dataclass(frozen=True)
class SignatureConfig:
    window: int = 90
    rescale: Optional[float] = None  # None means K = window
    depth: int = 4
    frame_stride: int = 10
    channels: int = 1

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.depth < 1 or self.frame_stride < 1:
            raise ValueError("depth and frame_stride must be >= 1")
        if self.rescale is not None and self.rescale <= 0:
            raise ValueError("rescale factor K must be > 0")
        if self.channels != 1:
            raise ValueError("only single-channel volumes are supported (one model per window)")

    @property
    def K(self) -> float:
        return float(self.window if self.rescale is None else self.rescale)

    @property
    def min_anchor(self) -> int:
        return (self.depth - 1) * self.frame_stride + self.window


@dataclass
class CorrelationVolume:
    tensor: np.ndarray  # (k, m, m, 1)
    anchor: int
    window: int


def correlation_matrix(segment: np.ndarray, K: float) -> np.ndarray:
    """Pairwise inner products of the channel rows of an m x w segment, divided by K."""
    segment = np.asarray(segment, dtype=np.float64)
    if segment.ndim != 2 or segment.shape[1] == 0:
        raise ValueError(f"segment must be m x w with w >= 1, got shape {segment.shape}")
    if K <= 0:
        raise ValueError("K must be > 0")
    return (segment @ segment.T) / K


def build_volume(series: TimeSeriesMatrix, t: int, cfg: SignatureConfig) -> CorrelationVolume:
    if t < cfg.min_anchor:
        raise ValueError(f"insufficient history: anchor {t} < {cfg.min_anchor} "
                         f"(depth {cfg.depth}, stride {cfg.frame_stride}, window {cfg.window})")
    if t > series.T:
        raise ValueError(f"anchor {t} beyond series length {series.T}")
    frames = []
    for j in range(cfg.depth):
        end = t - (cfg.depth - 1 - j) * cfg.frame_stride
        frames.append(correlation_matrix(series.values[:, end - cfg.window: end], cfg.K))
    return CorrelationVolume(np.stack(frames)[..., None], t, cfg.window)


@dataclass
class VolumeDataset:
    volumes: np.ndarray  # (n, k, m, m, 1)
    anchors: np.ndarray  # (n,)
    labels: Optional[np.ndarray]
    window: int

    def __len__(self) -> int:
        return len(self.anchors)

    def subset(self, idx) -> "VolumeDataset":
        return VolumeDataset(self.volumes[idx], self.anchors[idx],
                             None if self.labels is None else self.labels[idx], self.window)


def anchors_for(T: int, cfg: SignatureConfig, hop: int, start: Optional[int] = None) -> np.ndarray:
    if hop < 1:
        raise ValueError("hop must be >= 1")
    first = cfg.min_anchor if start is None else max(start, cfg.min_anchor)
    if first > T:
        raise ValueError(f"series of length {T} is too short for one volume (needs {cfg.min_anchor})")
    return np.arange(first, T + 1, hop)


def sliding_dataset(series: TimeSeriesMatrix, cfg: SignatureConfig, hop: int = 10,
                    start: Optional[int] = None, stop: Optional[int] = None) -> VolumeDataset:
    """All volumes at anchors ``min_anchor, min_anchor + hop, ...``.

    A volume is labelled anomalous when any timestep of its newest window is.
    ``start``/``stop`` restrict the anchor range so long series can be
    processed in chunks.
    """
    anchors = anchors_for(series.T, cfg, hop, start)
    if stop is not None:
        anchors = anchors[anchors < stop]
    w = cfg.window
    offsets = np.array([(cfg.depth - 1 - j) * cfg.frame_stride for j in range(cfg.depth)])
    ends = anchors[:, None] - offsets[None, :]
    uniq, inverse = np.unique(ends, return_inverse=True)
    # windows[e - w] covers rows [e - w, e)
    windows = sliding_window_view(series.values, w, axis=1).transpose(1, 0, 2)[uniq - w]
    mats = np.einsum("aiw,ajw->aij", windows, windows) / cfg.K
    volumes = mats[inverse.reshape(ends.shape)][..., None]
    labels = None
    if series.labels is not None:
        csum = np.concatenate([[0], np.cumsum(series.labels.astype(np.int64))])
        labels = (csum[anchors] - csum[anchors - w]) > 0
    return VolumeDataset(volumes, anchors, labels, w)


def stack_volumes(volumes: Sequence[CorrelationVolume]) -> np.ndarray:
    return np.stack([v.tensor for v in volumes])
