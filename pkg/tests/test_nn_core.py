import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hmnet import nn_core as nn
from hmnet.nn_core import (Adam, DimensionError, LSTMCell, ParamStore, RecurrentState, Tensor,
                           conv2d_apply, linear_apply, lstm_cell_step, maxpool2d_apply,
                           reverse_gradients)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def scalar_lstm(x, h, c, wi, wh, b):
    """Gate equations written out for a 1-unit cell; weights ordered (i, f, g, o)."""
    z = [wi[k] * x + wh[k] * h + b[k] for k in range(4)]
    i, f, g, o = sig(z[0]), sig(z[1]), math.tanh(z[2]), sig(z[3])
    c2 = f * c + i * g
    return o * math.tanh(c2), c2


# ---------------------------------------------------------------- linear


def test_linear_identity():
    out = linear_apply([1.0, 2.0], np.eye(2), [0.0, 0.0])
    np.testing.assert_array_equal(out.data, [1.0, 2.0])


def test_linear_hand_multiply():
    out = linear_apply([1.0, 2.0], [[2.0, 3.0]], [1.0])
    assert out.data.tolist() == [9.0]


def test_linear_zero_input_passes_bias():
    w = np.random.default_rng(0).normal(size=(2, 2))
    np.testing.assert_array_equal(linear_apply([0.0, 0.0], w, [5.0, -5.0]).data, [5.0, -5.0])


def test_linear_shape_mismatch():
    with pytest.raises(DimensionError):
        linear_apply([1.0, 2.0, 3.0], np.eye(2), [0.0, 0.0])
    with pytest.raises(DimensionError):
        linear_apply([1.0, 2.0], np.eye(2), [0.0])


@given(arrays(np.float64, 3, elements=finite), st.floats(-10, 10))
def test_linear_is_affine(x, alpha):
    w = np.arange(6.0).reshape(2, 3) / 7.0
    b = np.array([0.3, -1.2])
    zero = linear_apply(np.zeros(3), w, b).data
    lhs = linear_apply(alpha * x, w, b).data - zero
    rhs = alpha * (linear_apply(x, w, b).data - zero)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * (1 + np.abs(rhs).max()))


# ---------------------------------------------------------------- lstm


def _cell(n_in, hidden, value=0.0):
    store = ParamStore(0)
    cell = LSTMCell(store, "c", n_in, hidden)
    store.fill(value)
    return store, cell


def test_lstm_zero_params_fixed_point():
    _, cell = _cell(3, 2)
    st_ = cell(np.array([[0.4, -2.0, 7.0]]), cell.zero_state(1))
    np.testing.assert_array_equal(st_.hidden.data, 0.0)
    np.testing.assert_array_equal(st_.cell.data, 0.0)


def test_lstm_zero_params_half_forget():
    _, cell = _cell(1, 1)
    st_ = cell(np.array([[0.0]]), RecurrentState(Tensor(np.zeros((1, 1))), Tensor(np.array([[2.0]]))))
    assert st_.cell.data[0, 0] == 1.0
    assert abs(st_.hidden.data[0, 0] - 0.5 * math.tanh(1.0)) < 1e-15
    assert abs(st_.hidden.data[0, 0] - 0.3808) < 1e-4


def test_lstm_scalar_oracle():
    wi, wh, b = [0.3, -0.7, 1.1, 0.5], [-0.2, 0.4, 0.9, -1.3], [0.05, 0.6, -0.1, 0.2]
    h, c = 0.25, -0.4
    x = 0.8
    out = lstm_cell_step(np.array([[x]]), RecurrentState(Tensor([[h]]), Tensor([[c]])),
                         Tensor(np.array(wi)[:, None]), Tensor(np.array(wh)[:, None]), Tensor(b))
    h2, c2 = scalar_lstm(x, h, c, wi, wh, b)
    assert abs(out.hidden.data[0, 0] - h2) < 1e-14
    assert abs(out.cell.data[0, 0] - c2) < 1e-14


def test_lstm_shape_errors():
    store, cell = _cell(2, 3)
    with pytest.raises(DimensionError):
        cell(np.zeros((1, 4)), cell.zero_state(1))
    with pytest.raises(DimensionError):
        cell(np.zeros((1, 2)), RecurrentState(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2)))))


# ---------------------------------------------------------------- conv / pool


def test_conv_scaling_kernel():
    out = conv2d_apply(np.ones((1, 3, 3)), np.full((1, 1, 1, 1), 2.0), [0.0])
    np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 2.0))


def test_conv_hand_sum():
    out = conv2d_apply(np.array([[[1.0, 2.0], [3.0, 4.0]]]), np.ones((1, 1, 2, 2)), [1.0])
    assert out.shape == (1, 1, 1)
    assert out.data.item() == 11.0


def test_conv_zero_kernels_pass_bias():
    x = np.random.default_rng(1).normal(size=(2, 5, 4))
    out = conv2d_apply(x, np.zeros((3, 2, 3, 2)), [1.0, -2.0, 0.5])
    assert out.shape == (3, 3, 3)
    for o, b in enumerate([1.0, -2.0, 0.5]):
        np.testing.assert_array_equal(out.data[o], b)


@given(arrays(np.float64, (1, 4, 3), elements=finite))
def test_conv_unit_kernel_is_identity(x):
    np.testing.assert_array_equal(conv2d_apply(x, np.ones((1, 1, 1, 1)), [0.0]).data, x)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(2)
    x, k, b = rng.normal(size=(3, 6, 5)), rng.normal(size=(4, 3, 3, 2)), rng.normal(size=4)
    ref = np.zeros((4, 4, 4))
    for o in range(4):
        for i in range(4):
            for j in range(4):
                ref[o, i, j] = np.sum(x[:, i : i + 3, j : j + 2] * k[o]) + b[o]
    np.testing.assert_allclose(conv2d_apply(x, k, b).data, ref, atol=1e-12)


def test_conv_bad_channels():
    with pytest.raises(DimensionError):
        conv2d_apply(np.ones((2, 3, 3)), np.ones((1, 3, 1, 1)), [0.0])


def test_maxpool_hand():
    out = maxpool2d_apply(np.array([[[1.0, 2.0], [3.0, 4.0]]]), (2, 2))
    assert out.data.tolist() == [[[4.0]]]


def test_maxpool_constant_and_identity():
    np.testing.assert_array_equal(maxpool2d_apply(np.full((2, 4, 2), 3.5), (2, 2)).data, 3.5)
    x = np.random.default_rng(3).normal(size=(2, 3, 3))
    np.testing.assert_array_equal(maxpool2d_apply(x, (1, 1)).data, x)


def test_maxpool_indivisible():
    with pytest.raises(DimensionError):
        maxpool2d_apply(np.ones((1, 3, 2)), (2, 1))


# ---------------------------------------------------------------- reverse mode


def test_grad_linear_product():
    w = Tensor(np.array(1.7), requires_grad=True)
    reverse_gradients(w * 3.0)
    assert w.grad == 3.0


def test_grad_square():
    w = Tensor(np.array(5.0), requires_grad=True)
    reverse_gradients(nn.square(w - 2.0))
    assert w.grad == 6.0


def test_grad_accumulates_over_shared_use():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = nn.tsum(w * w + w)
    reverse_gradients(y)
    np.testing.assert_array_equal(w.grad, [3.0, 5.0])


def test_reverse_requires_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError):
        reverse_gradients(w * 2.0)


def test_no_grad_builds_no_graph():
    w = Tensor(np.ones(2), requires_grad=True)
    with nn.no_grad():
        y = nn.tsum(w * 2.0)
    assert not y.requires_grad and not y._parents


OPS = {
    "tanh": lambda t: nn.tanh(t),
    "sigmoid": lambda t: nn.sigmoid(t),
    "exp": lambda t: nn.exp(t * 0.3),
    "log": lambda t: nn.log(nn.square(t) + 1.0),
    "leaky": lambda t: nn.leaky_relu(t + 0.05),
    "div": lambda t: t / (nn.square(t) + 2.0),
    "getitem": lambda t: t[1:, ::2] * t[:-1, 1::2],
    "fancy": lambda t: nn.take_rows(t, np.array([0, 2, 2, 1])),
    "concat": lambda t: nn.concat([t, nn.tanh(t)], axis=0),
    "stack": lambda t: nn.stack([t, t * t], axis=1),
    "transpose": lambda t: nn.transpose(t, (1, 0)) * np.arange(3.0),
    "where": lambda t: nn.where(np.array([[True, False, True, True]] * 3), t * t, nn.tanh(t)),
    "mean": lambda t: nn.tmean(t * t, axis=0),
    "broadcast": lambda t: t * np.array([1.0, -2.0, 0.5, 3.0]) + nn.tsum(t, axis=1).reshape(3, 1),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    weights = rng.normal(size=OPS[name](Tensor(x.data)).shape)

    def value():
        with nn.no_grad():
            return float(np.sum(OPS[name](x).data * weights))

    reverse_gradients(nn.tsum(OPS[name](x) * weights))
    for idx in np.ndindex(x.shape):
        num = nn.finite_difference(value, x, idx)
        assert nn.relative_error(x.grad[idx], num) < 1e-6, (name, idx)


def test_layer_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    store = ParamStore(6)
    cell = LSTMCell(store, "cell", 3, 2)
    conv = nn.Conv2d(store, "conv", 2, 2, (2, 2))
    lin = nn.Linear(store, "lin", 2, 1)
    xs = rng.normal(size=(4, 2, 3))
    img = rng.normal(size=(2, 2, 3, 3))

    def loss():
        state = cell.zero_state(2)
        for t in range(4):
            state = cell(xs[t], state)
        c = nn.maxpool2d_apply(conv(img), (2, 1))  # (2, 2, 2, 2) -> (2, 2, 1, 2)
        feat = nn.tsum(c, axis=(2, 3))  # (2, 2)
        return nn.tsum(nn.square(lin(state.hidden * feat)))

    reverse_gradients(loss())

    def value():
        with nn.no_grad():
            return float(loss().data)

    for name, p in store.items():
        for idx in np.ndindex(p.shape):
            num = nn.finite_difference(value, p, idx)
            assert nn.relative_error(p.grad[idx], num) < 1e-6, (name, idx)


# ---------------------------------------------------------------- store / optimizer


def test_param_init_range_and_seed():
    a, b = ParamStore(3), ParamStore(3)
    wa, wb = a.add("w", (50, 16), fan_in=16), b.add("w", (50, 16), fan_in=16)
    np.testing.assert_array_equal(wa.data, wb.data)
    assert np.abs(wa.data).max() <= 0.25


def test_param_duplicate_name():
    s = ParamStore()
    s.add("w", (2,), 2)
    with pytest.raises(KeyError):
        s.add("w", (2,), 2)


def test_state_dict_roundtrip():
    s = ParamStore(1)
    s.add("a", (3, 2), 2)
    sd = s.state_dict()
    s.fill(0.0)
    s.load_state_dict(sd)
    np.testing.assert_array_equal(s["a"].data, sd["a"])
    with pytest.raises(DimensionError):
        s.load_state_dict({"a": np.zeros((2, 2))})


def test_adam_descends_quadratic():
    s = ParamStore(0)
    w = s.add("w", (3,), 1)
    opt = Adam(s, lr=0.1, clip_norm=None)
    target = np.array([1.0, -2.0, 0.5])
    for _ in range(300):
        s.zero_grad()
        reverse_gradients(nn.tsum(nn.square(w - target)))
        opt.step()
    np.testing.assert_allclose(w.data, target, atol=1e-3)


def test_adam_clips_global_norm():
    s = ParamStore(0)
    w = s.add("w", (2,), 1)
    w.data[:] = 0.0
    w.grad = np.array([30.0, 40.0])
    opt = Adam(s, lr=1.0, clip_norm=10.0)
    assert opt.step() == 50.0
    # first Adam step moves each coordinate by ~lr in the gradient's sign
    np.testing.assert_allclose(w.data, [-1.0, -1.0], atol=1e-6)


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_forward_backward_deterministic(seed):
    def run():
        s = ParamStore(seed)
        cell = LSTMCell(s, "c", 2, 3)
        st_ = cell.zero_state(1)
        for t in range(3):
            st_ = cell(np.array([[t, -t / 2]], dtype=float), st_)
        reverse_gradients(nn.tsum(st_.hidden))
        return st_.hidden.data.copy(), {k: v.copy() for k, v in s.grads.items()}

    (h1, g1), (h2, g2) = run(), run()
    np.testing.assert_array_equal(h1, h2)
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])
