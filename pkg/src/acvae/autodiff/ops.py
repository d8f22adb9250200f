"""Differentiable ops over :class:`Tensor`.

Spatial ops use channels-last layout: a single volume is ``(D, H, W, C)`` and a
batch is ``(N, D, H, W, C)``. Convolution kernels are
``(kd, kh, kw, c_in, c_out)``; the transposed convolution reuses the kernel of
the convolution it inverts, so it maps ``c_out`` channels back to ``c_in``.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_node

Triple = tuple[int, int, int]


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting, gradients summed back)
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    a = as_tensor(a, dtype=b.dtype if isinstance(b, Tensor) else None)
    b = as_tensor(b, dtype=a.dtype)
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_node(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_node(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_node(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return make_node(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a: Tensor) -> Tensor:
    return make_node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where the clamp is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return make_node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# shape manipulation and reductions
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def _max_reduce(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    """Max over ``axes`` (kept as size 1). Ties route the gradient to the lowest flat index."""
    axes = tuple(ax % a.ndim for ax in axes)
    keep = [ax for ax in range(a.ndim) if ax not in axes]
    perm = keep + list(axes)
    moved = a.data.transpose(perm)
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    arg = flat.argmax(axis=-1)
    out_flat = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out_shape = tuple(1 if ax in axes else n for ax, n in enumerate(a.shape))
    out = out_flat.reshape(out_shape)
    inv = np.argsort(perm)

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g.reshape(lead + (1,)), axis=-1)
        return (gflat.reshape(moved.shape).transpose(inv),)

    return make_node(out, (a,), backward)


def global_pool(x: Tensor, kind: str = "avg", over: str = "spatial") -> Tensor:
    """Reduce spatial axes (``over="spatial"``) or the channel axis, keeping size-1 dims."""
    if x.ndim not in (4, 5):
        raise ShapeError(f"global_pool expects a 4D or 5D tensor, got shape {x.shape}")
    if over == "spatial":
        axes = (x.ndim - 4, x.ndim - 3, x.ndim - 2)
    elif over == "channel":
        axes = (x.ndim - 1,)
    else:
        raise ValueError(f"unknown pooling axes {over!r}")
    if kind == "avg":
        return mean(x, axis=axes, keepdims=True)
    if kind == "max":
        return _max_reduce(x, axes)
    raise ValueError(f"unknown pooling kind {kind!r}")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

def dense(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    if bias is not None and bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({weights.shape[1]},)")
    out = x.data @ weights.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weights) if bias is None else (x, weights, bias)

    def backward(g):
        grads = [g @ weights.data.T, x.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_node(out, parents, backward)


# ---------------------------------------------------------------------------
# 3D convolution
# ---------------------------------------------------------------------------

def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ShapeError(f"expected a triple, got {v}")
    return v  # type: ignore[return-value]


def conv_output_shape(spatial: Sequence[int], ksize: Sequence[int], stride: Sequence[int],
                      padding: str) -> tuple[Triple, tuple[Triple, Triple]]:
    """Output extents plus (leading, trailing) zero padding per axis.

    ``same`` gives ``ceil(n / s)`` outputs; odd total padding puts the extra
    element on the trailing side.
    """
    out, lead, trail = [], [], []
    for n, k, s in zip(spatial, ksize, stride):
        if s < 1:
            raise ShapeError(f"strides must be >= 1, got {tuple(stride)}")
        if padding == "same":
            o = -(-n // s)
            total = max((o - 1) * s + k - n, 0)
            lo = total // 2
            out.append(o); lead.append(lo); trail.append(total - lo)
        elif padding == "valid":
            if k > n:
                raise ShapeError(f"kernel extent {tuple(ksize)} exceeds input extent {tuple(spatial)}")
            out.append((n - k) // s + 1); lead.append(0); trail.append(0)
        else:
            raise ValueError(f"unknown padding mode {padding!r}")
    return tuple(out), (tuple(lead), tuple(trail))  # type: ignore[return-value]


def _as_batch(x: np.ndarray, what: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 4:
        return x[None], True
    if x.ndim == 5:
        return x, False
    raise ShapeError(f"{what}: expected (D,H,W,C) or (N,D,H,W,C), got {x.shape}")


def _windows(xp: np.ndarray, ksize: Triple, stride: Triple, out: Triple) -> np.ndarray:
    """Gather patches into a ``(N*oD*oH*oW, kd*kh*kw*C)`` matrix."""
    n, c = xp.shape[0], xp.shape[-1]
    win = sliding_window_view(xp, ksize, axis=(1, 2, 3))
    win = win[:, : (out[0] - 1) * stride[0] + 1: stride[0],
              : (out[1] - 1) * stride[1] + 1: stride[1],
              : (out[2] - 1) * stride[2] + 1: stride[2]]
    win = win.transpose(0, 1, 2, 3, 5, 6, 7, 4)
    return win.reshape(n * out[0] * out[1] * out[2], ksize[0] * ksize[1] * ksize[2] * c)


def _input_adjoint(g: np.ndarray, w: np.ndarray, padded_shape: tuple[int, ...], stride: Triple,
                   out: Triple) -> np.ndarray:
    """Map output-space values ``g`` back onto the padded input grid of a convolution.

    Unit-stride layers that widen the channel count use a full correlation with
    the flipped kernel (one matmul); everything else adds per-tap products back
    onto the strided grid, which avoids gathering wide zero-dilated windows.
    """
    if stride == (1, 1, 1) and padded_shape[-1] >= w.shape[-1]:
        k = w.shape[:3]
        full = np.pad(g, [(0, 0)] + [(kk - 1, p - o) for kk, p, o in zip(k, padded_shape[1:4], out)] + [(0, 0)])
        flipped = w[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3)
        cols = _windows(full, k, stride, tuple(padded_shape[1:4]))
        return (cols @ flipped.reshape(-1, w.shape[3])).reshape(padded_shape)
    # one product per kernel tap, laid out tap-major so each scatter reads contiguously
    k, c_in, c_out = w.shape[:3], w.shape[3], w.shape[4]
    taps = np.matmul(g.reshape(1, -1, c_out), w.reshape(-1, c_in, c_out).transpose(0, 2, 1))
    taps = taps.reshape(k + (padded_shape[0],) + tuple(out) + (c_in,))
    xp = np.zeros(padded_shape, dtype=taps.dtype)
    sd, sh, sw = stride
    for a in range(k[0]):
        for b in range(k[1]):
            for d in range(k[2]):
                xp[:, a: a + sd * out[0]: sd, b: b + sh * out[1]: sh, d: d + sw * out[2]: sw, :] += taps[a, b, d]
    return xp


def _pad(x: np.ndarray, lead: Triple, trail: Triple) -> np.ndarray:
    if not any(lead) and not any(trail):
        return x
    widths = [(0, 0)] + [(lo, hi) for lo, hi in zip(lead, trail)] + [(0, 0)]
    return np.pad(x, widths)


def _crop(xp: np.ndarray, lead: Triple, spatial: Sequence[int]) -> np.ndarray:
    return xp[:, lead[0]: lead[0] + spatial[0], lead[1]: lead[1] + spatial[1],
              lead[2]: lead[2] + spatial[2], :]


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: Triple, padding: str):
    ksize = w.shape[:3]
    out, (lead, trail) = conv_output_shape(x.shape[1:4], ksize, stride, padding)
    xp = _pad(x, lead, trail)
    for n, k in zip(xp.shape[1:4], ksize):
        if k > n:
            raise ShapeError(f"kernel extent {ksize} exceeds padded input extent {xp.shape[1:4]}")
    cols = _windows(xp, ksize, stride, out)
    y = (cols @ w.reshape(-1, w.shape[-1])).reshape((x.shape[0],) + out + (w.shape[-1],))
    return y, cols, xp.shape, lead, out


def _check_kernel(x: np.ndarray, w: np.ndarray, channel_axis_in_kernel: int, what: str) -> None:
    if w.ndim != 5:
        raise ShapeError(f"{what}: kernel must be (kd,kh,kw,c_in,c_out), got {w.shape}")
    if x.shape[-1] != w.shape[channel_axis_in_kernel]:
        raise ShapeError(
            f"{what}: input has {x.shape[-1]} channels but kernel {w.shape} expects "
            f"{w.shape[channel_axis_in_kernel]}")


def conv3d(x: Tensor, kernel: Tensor, stride=1, padding: str = "same",
           bias: Optional[Tensor] = None) -> Tensor:
    """3D cross-correlation (the deep-learning "convolution")."""
    stride = _triple(stride)
    xb, single = _as_batch(x.data, "conv3d")
    _check_kernel(xb, kernel.data, 3, "conv3d")
    w = kernel.data
    y, cols, padded_shape, lead, out = _conv_forward(xb, w, stride, padding)
    if bias is not None:
        y = y + bias.data
    spatial = xb.shape[1:4]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gb = g[None] if single else g
        g2 = gb.reshape(-1, w.shape[-1])
        gx = None
        if x.requires_grad:
            gxp = _input_adjoint(gb, w, padded_shape, stride, out)
            gx = _crop(gxp, lead, spatial)
            gx = gx[0] if single else gx
        gw = (cols.T @ g2).reshape(w.shape) if kernel.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_node(y[0] if single else y, parents, backward)


def transposed_output_shape(spatial: Sequence[int], ksize: Sequence[int], stride: Sequence[int],
                            padding: str) -> Triple:
    if padding == "same":
        return tuple(n * s for n, s in zip(spatial, stride))  # type: ignore[return-value]
    if padding == "valid":
        return tuple((n - 1) * s + k for n, k, s in zip(spatial, ksize, stride))  # type: ignore[return-value]
    raise ValueError(f"unknown padding mode {padding!r}")


def conv3d_transposed(y: Tensor, kernel: Tensor, stride=1, padding: str = "same",
                      output_shape: Optional[Sequence[int]] = None,
                      bias: Optional[Tensor] = None) -> Tensor:
    """Adjoint of :func:`conv3d` with the same kernel, stride and padding.

    ``output_shape`` picks the spatial extent when several inputs of the forward
    convolution collapse onto the same output size (stride > 1).
    """
    stride = _triple(stride)
    yb, single = _as_batch(y.data, "conv3d_transposed")
    _check_kernel(yb, kernel.data, 4, "conv3d_transposed")
    w = kernel.data
    ksize = w.shape[:3]
    if output_shape is None:
        spatial = transposed_output_shape(yb.shape[1:4], ksize, stride, padding)
    else:
        spatial = _triple(output_shape)
    out, (lead, trail) = conv_output_shape(spatial, ksize, stride, padding)
    if tuple(out) != tuple(yb.shape[1:4]):
        raise ShapeError(
            f"conv3d_transposed: output shape {spatial} does not map back to input {yb.shape[1:4]} "
            f"under stride {stride} / {padding} padding")
    padded_shape = (yb.shape[0],) + tuple(n + lo + hi for n, lo, hi in zip(spatial, lead, trail)) + (w.shape[3],)
    for n, k in zip(padded_shape[1:4], ksize):
        if k > n:
            raise ShapeError(f"kernel extent {ksize} exceeds padded output extent {padded_shape[1:4]}")
    y2 = yb.reshape(-1, w.shape[-1])
    xp = _input_adjoint(yb, w, padded_shape, stride, out)
    x = _crop(xp, lead, spatial)
    if bias is not None:
        x = x + bias.data
    parents = (y, kernel) if bias is None else (y, kernel, bias)

    def backward(g):
        gb = g[None] if single else g
        gp = _pad(gb, lead, trail)
        cols = _windows(gp, ksize, stride, out)
        gy = None
        if y.requires_grad:
            gy = (cols @ w.reshape(-1, w.shape[-1])).reshape(yb.shape)
            gy = gy[0] if single else gy
        gw = (cols.T @ y2).reshape(w.shape) if kernel.requires_grad else None
        grads = [gy, gw]
        if bias is not None:
            grads.append(gb.reshape(-1, w.shape[3]).sum(axis=0))
        return grads

    return make_node(x[0] if single else x, parents, backward)


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------

def batch_norm(x: Tensor, state, mode: str = "train") -> Tensor:
    """Per-channel normalisation over every axis except the last.

    ``train`` normalises with batch statistics and folds them into the running
    averages of ``state``; ``infer`` uses only the running averages.
    """
    c = x.shape[-1]
    if c != state.gamma.shape[0]:
        raise ShapeError(f"batch_norm: {c} channels but state holds {state.gamma.shape[0]}")
    if x.shape[0] == 0:
        raise ShapeError("batch_norm: zero batch size")
    gamma, beta = state.gamma, state.beta
    axes = tuple(range(x.ndim - 1))
    if mode == "infer":
        inv = 1.0 / np.sqrt(state.running_var + state.epsilon)
        scale = (gamma.data * inv).astype(x.dtype)
        xhat = ((x.data - state.running_mean) * inv).astype(x.dtype)
        out = xhat * gamma.data + beta.data

        def backward_infer(g):
            return (g * scale, (g * xhat).sum(axis=axes), g.sum(axis=axes))

        return make_node(out, (x, gamma, beta), backward_infer)
    if mode != "train":
        raise ValueError(f"unknown batch-norm mode {mode!r}")

    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    count = x.size // c
    state.update_running(mu, var)

    def backward(g):
        gxhat = g * gamma.data
        gx = (inv / count) * (count * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return make_node(out, (x, gamma, beta), backward)


def glorot_bound(shape: Sequence[int]) -> float:
    fan_in, fan_out = fans(shape)
    return math.sqrt(6.0 / (fan_in + fan_out))


def fans(shape: Sequence[int]) -> tuple[int, int]:
    shape = tuple(shape)
    if len(shape) < 2:
        raise ShapeError(f"cannot derive fan-in/fan-out from shape {shape}")
    receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
    return shape[-2] * receptive, shape[-1] * receptive
