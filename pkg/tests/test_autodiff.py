import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import acvae.autodiff as ad
from acvae.autodiff import Tensor
from gradcheck import max_rel_error

GRAD_TOL = 1e-4


def brute_conv3d(x, w, stride, padding):
    """Nested-loop cross-correlation over an explicitly zero-padded input."""
    d, h, wd, cin = x.shape
    kd, kh, kw, _, cout = w.shape
    pads = []
    for n, k, s in zip((d, h, wd), (kd, kh, kw), stride):
        if padding == "same":
            o = math.ceil(n / s)
            total = max((o - 1) * s + k - n, 0)
            pads.append((total // 2, total - total // 2, o))
        else:
            pads.append((0, 0, (n - k) // s + 1))
    xp = np.zeros((d + pads[0][0] + pads[0][1], h + pads[1][0] + pads[1][1],
                   wd + pads[2][0] + pads[2][1], cin))
    xp[pads[0][0]:pads[0][0] + d, pads[1][0]:pads[1][0] + h, pads[2][0]:pads[2][0] + wd] = x
    out = np.zeros((pads[0][2], pads[1][2], pads[2][2], cout))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            for l in range(out.shape[2]):
                for o in range(cout):
                    acc = 0.0
                    for a in range(kd):
                        for b in range(kh):
                            for c in range(kw):
                                for ci in range(cin):
                                    acc += (xp[i * stride[0] + a, j * stride[1] + b, l * stride[2] + c, ci]
                                            * w[a, b, c, ci, o])
                    out[i, j, l, o] = acc
    return out


# -- conv3d -----------------------------------------------------------------

def test_conv3d_identity_kernel():
    x = np.random.default_rng(0).normal(size=(3, 4, 5, 1))
    k = np.ones((1, 1, 1, 1, 1))
    y = ad.conv3d(Tensor(x), Tensor(k), stride=1, padding="same")
    np.testing.assert_array_equal(y.data, x)


def test_conv3d_all_ones_valid():
    y = ad.conv3d(Tensor(np.ones((2, 3, 3, 1))), Tensor(np.ones((2, 2, 2, 1, 1))), 1, "valid")
    assert y.shape == (1, 2, 2, 1)
    np.testing.assert_array_equal(y.data, 8.0)


@pytest.mark.parametrize("stride,padding", [((1, 1, 1), "valid"), ((1, 1, 1), "same"),
                                            ((1, 2, 2), "same"), ((2, 2, 2), "same"),
                                            ((2, 1, 2), "valid")])
def test_conv3d_matches_nested_loop_oracle(stride, padding):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 4, 4, 2))
    w = rng.normal(size=(2, 2, 2, 2, 3))
    y = ad.conv3d(Tensor(x), Tensor(w), stride, padding)
    ref = brute_conv3d(x, w, stride, padding)
    assert y.shape == ref.shape
    assert np.max(np.abs(y.data - ref)) <= 1e-12


def test_conv3d_batched_equals_per_sample():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 4, 6, 6, 2))
    w = rng.normal(size=(3, 3, 3, 2, 4))
    yb = ad.conv3d(Tensor(x), Tensor(w), (1, 2, 2), "same").data
    for i in range(3):
        np.testing.assert_allclose(yb[i], ad.conv3d(Tensor(x[i]), Tensor(w), (1, 2, 2), "same").data,
                                   rtol=0, atol=1e-12)


def test_conv3d_shape_errors():
    with pytest.raises(ad.ShapeError, match="channels"):
        ad.conv3d(Tensor(np.ones((2, 3, 3, 2))), Tensor(np.ones((1, 1, 1, 1, 1))))
    with pytest.raises(ad.ShapeError, match="exceeds"):
        ad.conv3d(Tensor(np.ones((1, 3, 3, 1))), Tensor(np.ones((2, 2, 2, 1, 1))), 1, "valid")
    with pytest.raises(ad.ShapeError, match="stride"):
        ad.conv3d(Tensor(np.ones((2, 3, 3, 1))), Tensor(np.ones((1, 1, 1, 1, 1))), (0, 1, 1))


# -- transposed conv ----------------------------------------------------------

def test_conv3d_transposed_identity():
    x = np.random.default_rng(3).normal(size=(2, 3, 3, 1))
    y = ad.conv3d_transposed(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))), 1, "same")
    np.testing.assert_array_equal(y.data, x)


def test_conv3d_transposed_shape_arithmetic():
    y = ad.conv3d_transposed(Tensor(np.zeros((2, 5, 5, 8))), Tensor(np.zeros((3, 3, 3, 4, 8))),
                             (1, 2, 2), "same")
    assert y.shape == (2, 10, 10, 4)


ADJOINT_CASES = [
    ((4, 8, 8, 1), (3, 3, 3, 1, 8), (1, 2, 2), "same", None),
    ((4, 4, 4, 8), (3, 3, 3, 8, 16), (1, 2, 2), "same", None),
    ((4, 2, 2, 16), (3, 3, 3, 16, 32), (2, 2, 2), "same", None),
    ((2, 1, 1, 32), (3, 3, 3, 32, 64), (2, 2, 2), "same", None),
    ((4, 8, 8, 8), (3, 3, 3, 8, 2), (1, 1, 1), "same", None),
    ((3, 4, 4, 2), (2, 2, 2, 2, 3), (1, 1, 1), "valid", None),
    ((5, 7, 6, 2), (3, 2, 3, 2, 3), (2, 3, 2), "same", None),
    ((4, 40, 40, 1), (3, 3, 3, 1, 4), (1, 2, 2), "same", None),
]


@pytest.mark.parametrize("xs,ks,stride,padding,_", ADJOINT_CASES)
def test_adjoint_identity(xs, ks, stride, padding, _):
    rng = np.random.default_rng(4)
    x = rng.normal(size=xs)
    k = rng.normal(size=ks)
    cx = ad.conv3d(Tensor(x), Tensor(k), stride, padding)
    y = rng.normal(size=cx.shape)
    ty = ad.conv3d_transposed(Tensor(y), Tensor(k), stride, padding, output_shape=xs[:3])
    assert ty.shape == x.shape
    lhs = float(np.sum(cx.data * y))
    rhs = float(np.sum(x * ty.data))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_transposed_rejects_unreachable_output_shape():
    with pytest.raises(ad.ShapeError):
        ad.conv3d_transposed(Tensor(np.zeros((2, 2, 2, 1))), Tensor(np.zeros((3, 3, 3, 1, 1))),
                             2, "same", output_shape=(8, 8, 8))


# -- dense / activations ------------------------------------------------------

def test_dense_identity_and_matmul():
    x = np.array([[1.0, 1.0]])
    y = ad.dense(Tensor(x), Tensor(np.eye(2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(y.data, x)
    y = ad.dense(Tensor(x), Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(y.data, [[4.0, 6.0]])


def test_dense_dimension_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.dense(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))))


def test_dense_weight_gradient_fd():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(4, 3)))
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    f = lambda: ad.reduce_sum(ad.square(ad.dense(x, w, b)))
    assert max_rel_error(f, [w, b]) < 1e-6


def test_activation_values():
    r = ad.activation(Tensor(np.array([-1.0, 2.0])), "relu")
    np.testing.assert_array_equal(r.data, [0.0, 2.0])
    assert ad.activation(Tensor(np.array(0.0)), "sigmoid").item() == 0.5
    s = ad.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
    assert np.all(np.isfinite(s))


def test_sigmoid_gradient_at_zero():
    x = Tensor(np.array([0.0]), requires_grad=True)
    ad.reduce_sum(ad.sigmoid(x)).backward()
    assert x.grad[0] == 0.25
    assert max_rel_error(lambda: ad.reduce_sum(ad.sigmoid(x)), [x]) < 1e-8


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=20))
def test_sigmoid_in_open_unit_interval(vals):
    s = ad.sigmoid(Tensor(np.array(vals))).data
    assert np.all(s > 0) and np.all(s < 1)


# -- batch norm -----------------------------------------------------------------

def test_batch_norm_train_normalizes():
    rng = np.random.default_rng(6)
    x = rng.normal(3.0, 2.0, size=(8, 2, 3, 3, 4))
    state = ad.BatchNormState.create(4, epsilon=1e-12)
    y = ad.batch_norm(Tensor(x), state, "train").data
    np.testing.assert_allclose(y.mean(axis=(0, 1, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 1, 2, 3)), 1.0, atol=1e-9)


def test_batch_norm_running_update():
    state = ad.BatchNormState.create(1, decay=0.9)
    x = np.full((4, 1, 1, 1, 1), 2.0)
    ad.batch_norm(Tensor(x), state, "train")
    assert state.running_mean[0] == pytest.approx(0.2, abs=1e-15)
    assert state.running_var[0] == pytest.approx(0.9, abs=1e-15)


def test_batch_norm_infer_constant_at_running_mean():
    state = ad.BatchNormState.create(3)
    state.running_mean = np.array([0.5, -1.0, 2.0])
    state.running_var = np.array([2.0, 0.1, 3.0])
    state.beta.data[:] = [0.1, 0.2, 0.3]
    state.gamma.data[:] = [5.0, 6.0, 7.0]
    x = np.broadcast_to(state.running_mean, (2, 2, 2, 2, 3)).copy()
    y = ad.batch_norm(Tensor(x), state, "infer").data
    np.testing.assert_array_equal(y, np.broadcast_to(state.beta.data, y.shape))


def test_batch_norm_errors():
    with pytest.raises(ad.ShapeError):
        ad.batch_norm(Tensor(np.ones((2, 1, 1, 1, 3))), ad.BatchNormState.create(2))
    with pytest.raises(ad.ShapeError, match="zero batch"):
        ad.batch_norm(Tensor(np.ones((0, 1, 1, 1, 2))), ad.BatchNormState.create(2))
    with pytest.raises(ValueError):
        ad.BatchNormState.create(2, decay=1.0)


# -- pooling ------------------------------------------------------------------------

def test_global_pool_constant():
    x = Tensor(np.full((2, 3, 3, 4), 1.7))
    for kind in ("avg", "max"):
        for over in ("spatial", "channel"):
            np.testing.assert_allclose(ad.global_pool(x, kind, over).data, 1.7, rtol=0, atol=1e-15)


def test_global_pool_shapes_and_max():
    x = np.zeros((2, 3, 3, 1))
    x[1, 2, 0, 0] = 5.0
    y = ad.global_pool(Tensor(x), "max", "spatial")
    assert y.shape == (1, 1, 1, 1)
    assert y.item() == 5.0
    assert ad.global_pool(Tensor(np.zeros((5, 2, 3, 3, 4))), "avg", "channel").shape == (5, 2, 3, 3, 1)


def test_global_pool_channel_mean_oracle():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 4, 5, 6))
    y = ad.global_pool(Tensor(x), "avg", "channel").data
    oracle = np.empty((3, 4, 5, 1))
    for idx in np.ndindex(3, 4, 5):
        oracle[idx + (0,)] = sum(x[idx + (c,)] for c in range(6)) / 6
    assert np.max(np.abs(y - oracle)) <= 1e-12


def test_max_pool_tie_goes_to_lowest_index():
    x = Tensor(np.ones((1, 2, 2, 1)), requires_grad=True)
    ad.reduce_sum(ad.global_pool(x, "max", "spatial")).backward()
    np.testing.assert_array_equal(x.grad.reshape(-1), [1.0, 0.0, 0.0, 0.0])


# -- backward -------------------------------------------------------------------------

def test_backward_sum_of_squares():
    x = Tensor(np.array([1.0, -2.0, 3.5]), requires_grad=True)
    ad.reduce_sum(ad.square(x)).backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_constant_gives_zero():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    c = Tensor(np.array(3.0))
    loss = ad.add(ad.mul(ad.reduce_sum(p), 0.0), c)
    (g,) = ad.grad(loss, [p])
    np.testing.assert_array_equal(g, 0.0)
    (g,) = ad.grad(ad.reduce_sum(ad.square(Tensor(np.ones(2)))), [p])
    np.testing.assert_array_equal(g, 0.0)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.ShapeError, match="scalar"):
        ad.square(x).backward()


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ad.mul(x, x)
    ad.reduce_sum(ad.add(y, y)).backward()
    assert x.grad[0] == 8.0


# -- per-op finite-difference suite --------------------------------------------------

def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _weighted(t, w):
    return ad.reduce_sum(ad.mul(t, w))


OP_CASES = {
    "add_broadcast": lambda r: ((a := _rand(r, 2, 3, 4)), (b := _rand(r, 1, 1, 4)),
                                lambda: _weighted(ad.add(a, b), W(r, 2, 3, 4))),
    "sub": lambda r: ((a := _rand(r, 3, 2)), (b := _rand(r, 3, 2)), lambda: _weighted(ad.sub(a, b), W(r, 3, 2))),
    "mul_broadcast": lambda r: ((a := _rand(r, 2, 2, 3)), (b := _rand(r, 2, 1, 3)),
                                lambda: _weighted(ad.mul(a, b), W(r, 2, 2, 3))),
    "div": lambda r: ((a := _rand(r, 4)), (b := Tensor(r.uniform(1, 2, 4), requires_grad=True)),
                      lambda: _weighted(ad.div(a, b), W(r, 4))),
    "exp_log": lambda r: ((a := Tensor(r.uniform(0.5, 2, (3, 3)), requires_grad=True)),
                          lambda: _weighted(ad.log(ad.exp(ad.mul(a, a))), W(r, 3, 3))),
    "mean_axis": lambda r: ((a := _rand(r, 2, 3, 4)), lambda: _weighted(ad.mean(a, axis=(0, 2)), W(r, 3))),
    "reshape_getitem": lambda r: ((a := _rand(r, 2, 6)),
                                  lambda: _weighted(ad.reshape(a, (3, 4))[:, 1:3], W(r, 3, 2))),
    "concat": lambda r: ((a := _rand(r, 2, 3)), (b := _rand(r, 2, 2)),
                         lambda: _weighted(ad.concat([a, b], axis=1), W(r, 2, 5))),
    "clip": lambda r: ((a := Tensor(np.array([-3.0, -0.5, 0.4, 2.5]), requires_grad=True)),
                       lambda: _weighted(ad.clip(a, -1, 1), W(r, 4))),
    "relu": lambda r: ((a := _rand(r, 3, 4)), lambda: _weighted(ad.relu(a), W(r, 3, 4))),
    "sigmoid": lambda r: ((a := _rand(r, 3, 4)), lambda: _weighted(ad.sigmoid(a), W(r, 3, 4))),
    "dense": lambda r: ((x := _rand(r, 3, 4)), (w := _rand(r, 4, 2)), (b := _rand(r, 2)),
                        lambda: _weighted(ad.dense(x, w, b), W(r, 3, 2))),
    "conv3d_same": lambda r: ((x := _rand(r, 2, 3, 4, 4, 2)), (k := _rand(r, 3, 3, 3, 2, 3)), (b := _rand(r, 3)),
                              lambda: _weighted(ad.conv3d(x, k, (1, 2, 2), "same", bias=b), W(r, 2, 3, 2, 2, 3))),
    "conv3d_valid": lambda r: ((x := _rand(r, 3, 4, 4, 2)), (k := _rand(r, 2, 2, 2, 2, 3)),
                               lambda: _weighted(ad.conv3d(x, k, 1, "valid"), W(r, 2, 3, 3, 3))),
    "conv3d_transposed": lambda r: ((y := _rand(r, 2, 2, 2, 2, 3)), (k := _rand(r, 3, 3, 3, 2, 3)), (b := _rand(r, 2)),
                                    lambda: _weighted(ad.conv3d_transposed(y, k, (1, 2, 2), "same",
                                                                           output_shape=(2, 3, 4), bias=b),
                                                      W(r, 2, 2, 3, 4, 2))),
    "global_avg_spatial": lambda r: ((a := _rand(r, 2, 2, 3, 3, 4)),
                                     lambda: _weighted(ad.global_pool(a, "avg", "spatial"), W(r, 2, 1, 1, 1, 4))),
    "global_max_spatial": lambda r: ((a := _rand(r, 2, 2, 3, 3, 4)),
                                     lambda: _weighted(ad.global_pool(a, "max", "spatial"), W(r, 2, 1, 1, 1, 4))),
    "global_max_channel": lambda r: ((a := _rand(r, 2, 2, 3, 3, 4)),
                                     lambda: _weighted(ad.global_pool(a, "max", "channel"), W(r, 2, 2, 3, 3, 1))),
}


def W(r, *shape):
    # fixed random cotangent so every output element feeds the loss differently
    return np.random.default_rng(sum(shape)).normal(size=shape)


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    *params, f = OP_CASES[name](np.random.default_rng(11))
    assert max_rel_error(f, params) < GRAD_TOL


@pytest.mark.parametrize("mode", ["train", "infer"])
def test_batch_norm_gradients(mode):
    rng = np.random.default_rng(12)
    x = _rand(rng, 4, 2, 2, 2, 3)
    state = ad.BatchNormState.create(3)
    state.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    state.beta.data[:] = rng.normal(size=3)
    state.running_mean = rng.normal(size=3)
    state.running_var = rng.uniform(0.5, 2, 3)
    w = W(rng, 4, 2, 2, 2, 3)

    def f():
        rm, rv = state.running_mean.copy(), state.running_var.copy()
        out = _weighted(ad.batch_norm(x, state, mode), w)
        state.running_mean, state.running_var = rm, rv
        return out

    assert max_rel_error(f, [x, state.gamma, state.beta]) < GRAD_TOL


# -- Adam -------------------------------------------------------------------------------

def test_adam_first_step_closed_form():
    g = np.array([0.3, -2.0, 1e-3])
    p = Tensor(np.zeros(3), requires_grad=True)
    st_ = ad.AdamState(lr=0.01)
    ad.adam_step([p], [g], st_)
    np.testing.assert_allclose(p.data, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_zero_gradient_is_noop():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    st_ = ad.AdamState()
    for _ in range(3):
        ad.adam_step([p], [np.zeros(2)], st_)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert st_.step == 3


def _reference_adam(x0, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v = x0, 0.0, 0.0
    for t in range(1, steps + 1):
        g = 2.0 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x = x - lr * mhat / (math.sqrt(vhat) + eps)
    return x


def test_adam_trajectory_matches_reference_loop():
    p = Tensor(np.array([1.5]), requires_grad=True)
    st_ = ad.AdamState(lr=0.05)
    for _ in range(100):
        (g,) = ad.grad(ad.reduce_sum(ad.square(p)), [p])
        ad.adam_step([p], [g], st_)
    assert abs(p.data[0] - _reference_adam(1.5, 100, lr=0.05)) <= 1e-12


# -- Glorot ----------------------------------------------------------------------------

def test_glorot_support_variance_and_determinism():
    shape = (10, 10_000)
    fan_in, fan_out = 10, 10_000
    t = ad.glorot_uniform(shape, ad.make_rng(3))
    bound = math.sqrt(6 / (fan_in + fan_out))
    assert np.all(np.abs(t.data) <= bound)
    assert abs(t.data.var() / (2 / (fan_in + fan_out)) - 1) < 0.05
    np.testing.assert_array_equal(t.data, ad.glorot_uniform(shape, ad.make_rng(3)).data)


def test_glorot_conv_fans():
    t = ad.glorot_uniform((3, 3, 3, 4, 8), ad.make_rng(0))
    assert np.all(np.abs(t.data) <= math.sqrt(6 / (27 * 4 + 27 * 8)))
