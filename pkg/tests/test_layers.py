import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stgat_fuser.errors import ShapeError, ValidationError
from stgat_fuser.gradcheck import check_conv1d, check_layer_norm, check_linear, check_lstm
from stgat_fuser.layers import LSTM, Conv1d, LayerNorm, Linear, layer_rng
from stgat_fuser.tensor import Tensor


def conv_with(kernel, bias, padding=0):
    kernel = np.asarray(kernel, dtype=float)
    layer = Conv1d(kernel.shape[1], kernel.shape[0], kernel.shape[2], np.random.default_rng(0), padding=padding)
    layer.kernel.data[...] = kernel
    layer.bias.data[...] = bias
    return layer


def test_conv_identity_kernel():
    np.testing.assert_array_equal(conv_with([[[1]]], [0])(Tensor([[[5, 7]]])).data, [[[5, 7]]])


def test_conv_moving_sum():
    np.testing.assert_array_equal(conv_with([[[1, 1]]], [0])(Tensor([[[1, 2, 3]]])).data, [[[3, 5]]])


def test_conv_same_padding_keeps_length():
    layer = Conv1d(7, 32, 3, np.random.default_rng(0), padding=1)
    assert layer(Tensor(np.ones((2, 7, 4)))).shape == (2, 32, 4)
    assert layer.output_length(4) == 4


def test_conv_matches_direct_cross_correlation(rng):
    layer = Conv1d(3, 2, 3, rng, padding=1)
    x = rng.normal(size=(2, 3, 6))
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1)))
    k = layer.kernel.data
    ref = np.empty((2, 2, 6))
    for b in range(2):
        for o in range(2):
            for t in range(6):
                ref[b, o, t] = np.sum(k[o] * padded[b, :, t:t + 3]) + layer.bias.data[o]
    np.testing.assert_allclose(layer(Tensor(x)).data, ref, atol=1e-12)


def test_conv_errors():
    layer = Conv1d(2, 1, 3, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        layer(Tensor(np.ones((1, 3, 5))))
    with pytest.raises(ShapeError):
        layer(Tensor(np.ones((1, 2, 2))))
    with pytest.raises(ValidationError):
        Conv1d(2, 1, 0, np.random.default_rng(0))


def test_linear_examples():
    layer = Linear(2, 2, np.random.default_rng(0))
    layer.weight.data[...] = np.eye(2)
    layer.bias.data[...] = 0
    np.testing.assert_array_equal(layer(Tensor([[4.0, -1.0]])).data, [[4, -1]])
    layer = Linear(2, 1, np.random.default_rng(0))
    layer.weight.data[...] = [[1, 1]]
    layer.bias.data[...] = [1]
    np.testing.assert_array_equal(layer(Tensor([2.0, 3.0])).data, [6])
    with pytest.raises(ShapeError):
        layer(Tensor([1.0, 2.0, 3.0]))


def test_layer_norm_formula():
    out = LayerNorm(3, eps=1e-12)(Tensor([1.0, 2.0, 3.0])).data
    np.testing.assert_allclose(out, [-1.224744871391589, 0, 1.224744871391589], atol=1e-9)


def test_layer_norm_constant_row_gives_offset():
    ln = LayerNorm(3)
    ln.offset.data[...] = [0.1, -0.2, 0.3]
    np.testing.assert_allclose(ln(Tensor([5.0, 5.0, 5.0])).data, [0.1, -0.2, 0.3], atol=1e-15)


def test_layer_norm_feature_mismatch():
    with pytest.raises(ShapeError):
        LayerNorm(4)(Tensor(np.ones((2, 3))))
    with pytest.raises(ValidationError):
        LayerNorm(4, eps=0)


rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)), elements=st.floats(-100, 100))


@settings(max_examples=60)
@given(rows)
def test_layer_norm_standardises(x):
    spread = x.max(axis=-1) - x.min(axis=-1)
    x = x[spread > 1e-1]
    if not len(x):
        return
    out = LayerNorm(x.shape[-1], eps=1e-12)(Tensor(x)).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-9
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=40)
@given(rows, st.floats(0.5, 20), st.floats(-50, 50))
def test_layer_norm_affine_invariance(x, a, b):
    spread = x.max(axis=-1) - x.min(axis=-1)
    x = x[spread > 1.0]
    if not len(x):
        return
    ln = LayerNorm(x.shape[-1])
    # eps inside the square root shifts y = z / sqrt(var + eps) by about |z| * eps / (2 var),
    # and a standardised entry satisfies |z| <= sqrt(n - 1)
    var = min(x.var(axis=-1).min(), (a * x).var(axis=-1).min())
    tol = np.sqrt(x.shape[-1]) * ln.eps / (2 * var) + 1e-10
    np.testing.assert_allclose(ln(Tensor(a * x + b)).data, ln(Tensor(x)).data, atol=tol)


def test_lstm_zero_weights_fixed_point(rng):
    lstm = LSTM(3, 4, rng)
    for p in lstm.parameters().values():
        p.data[...] = 0
    out, (h, c) = lstm(Tensor(rng.normal(size=(2, 5, 3))))
    assert not out.data.any() and not h.data.any() and not c.data.any()


def test_lstm_single_step_is_one_cell(rng):
    lstm = LSTM(3, 4, rng)
    x = rng.normal(size=(2, 1, 3))
    out, (h, c) = lstm(Tensor(x))
    sig = lambda z: 1 / (1 + np.exp(-z))
    gates = x[:, 0] @ lstm.weight_ih.data.T + lstm.bias.data
    i, f, g, o = np.split(gates, 4, axis=1)
    c_ref = sig(i) * np.tanh(g)
    h_ref = sig(o) * np.tanh(c_ref)
    np.testing.assert_allclose(h.data, h_ref, atol=1e-14)
    np.testing.assert_allclose(c.data, c_ref, atol=1e-14)
    np.testing.assert_allclose(out.data[:, 0], h_ref, atol=1e-14)


def test_lstm_forget_bias_and_gate_blocks(rng):
    lstm = LSTM(3, 5, rng)
    np.testing.assert_array_equal(lstm.bias.data[5:10], 1.0)
    assert lstm.weight_ih.shape == (20, 3) and lstm.weight_hh.shape == (20, 5)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 6, 3), elements=st.floats(-1e3, 1e3)))
def test_lstm_hidden_bounded(x):
    out, _ = LSTM(3, 4, np.random.default_rng(0))(Tensor(x))
    assert (np.abs(out.data) <= 1).all()
    assert (np.abs(out.data) < 1).all() or np.abs(x).max() > 10


def test_lstm_shape_errors(rng):
    lstm = LSTM(3, 4, rng)
    with pytest.raises(ShapeError):
        lstm(Tensor(np.ones((2, 5, 4))))
    with pytest.raises(ShapeError, match="h0"):
        lstm(Tensor(np.ones((2, 5, 3))), h0=Tensor(np.zeros((2, 3))))


def test_layer_rng_keyed_by_name():
    a = layer_rng(3, "lstm1").uniform(size=4)
    assert np.array_equal(a, layer_rng(3, "lstm1").uniform(size=4))
    assert not np.array_equal(a, layer_rng(3, "lstm2").uniform(size=4))
    assert not np.array_equal(a, layer_rng(4, "lstm1").uniform(size=4))


def test_init_bound():
    layer = Linear(16, 8, np.random.default_rng(0))
    assert np.abs(layer.weight.data).max() <= 0.25


@pytest.mark.parametrize("check", [check_linear, check_conv1d, check_layer_norm, check_lstm])
def test_layer_gradients(check):
    assert check(np.random.default_rng(42)) < 1e-4
