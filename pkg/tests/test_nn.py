import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaitdyad import nn
from gaitdyad.nn import serialize
from gaitdyad.nn.gradcheck import max_relative_error, numerical_gradient

TOL = 1e-4
H_FD = 1e-5


def layer_gradcheck(layer, x, seed):
    """Check input and parameter gradients of ``sum(w * layer(x))``."""
    rng = np.random.default_rng(seed + 1000)
    y, _ = layer.forward(x)
    w = rng.standard_normal(y.shape)

    def loss():
        return float(np.sum(w * layer.forward(x)[0]))

    _, cache = layer.forward(x)
    dx, grads = layer.backward(cache, w)
    errs = [max_relative_error(dx, numerical_gradient(loss, x, H_FD))]
    for name, p in layer.params.items():
        errs.append(max_relative_error(grads[name], numerical_gradient(loss, p, H_FD)))
    return max(errs)


# --- forward examples -------------------------------------------------------


def test_dense_identity():
    layer = nn.Dense(2, 2)
    layer.params["W"] = np.eye(2)
    np.testing.assert_array_equal(layer(np.array([[1.0, 0.0]])), [[1.0, 0.0]])


def test_maxpool_definition():
    y = nn.MaxPool1D(2)(np.array([[[1.0, 3.0, 2.0, 5.0]]]))
    np.testing.assert_array_equal(y, [[[3.0, 5.0]]])


def test_conv1d_hand_computed():
    conv = nn.Conv1D(1, 1, 2)
    conv.params["W"] = np.array([[[1.0, -1.0]]])
    y = conv(np.array([[[2.0, 2.0, 5.0]]]))
    np.testing.assert_array_equal(y, [[[0.0, -3.0]]])


def test_conv1d_stride():
    conv = nn.Conv1D(1, 1, 2, stride=2)
    conv.params["W"] = np.array([[[1.0, 1.0]]])
    y = conv(np.arange(5, dtype=float)[None, None])
    np.testing.assert_array_equal(y, [[[1.0, 5.0]]])


def test_shape_mismatch_names_layer():
    with pytest.raises(nn.ShapeError, match="dense"):
        nn.Dense(3, 2).forward(np.zeros((1, 4)))
    with pytest.raises(nn.ShapeError, match="conv1d"):
        nn.Conv1D(2, 1, 3).forward(np.zeros((1, 1, 10)))


def test_missing_cache():
    with pytest.raises(nn.MissingCacheError):
        nn.Dense(2, 2).backward(None, np.zeros((1, 2)))
    with pytest.raises(nn.MissingCacheError):
        nn.lstm_backward({}, None, np.zeros((1, 1, 1)))


# --- backward -----------------------------------------------------------------


def test_dense_identity_backward():
    layer = nn.Dense(2, 2)
    layer.params["W"] = np.eye(2)
    _, cache = layer.forward(np.array([[0.3, -0.2]]))
    g = np.array([[1.5, -2.0]])
    dx, _ = layer.backward(cache, g)
    np.testing.assert_array_equal(dx, g)


def _random_layers(rng):
    return [
        (nn.Dense(4, 3, rng=rng), rng.standard_normal((5, 4))),
        (nn.Conv1D(2, 3, 3, stride=1, rng=rng), rng.standard_normal((2, 2, 9))),
        (nn.Conv1D(2, 2, 3, stride=2, rng=rng), rng.standard_normal((2, 2, 10))),
        (nn.MaxPool1D(2), rng.standard_normal((2, 3, 8))),
        (nn.MaxPool1D(3, stride=2), rng.standard_normal((2, 2, 9))),
        (nn.Activation("tanh"), rng.standard_normal((3, 4))),
        (nn.Activation("sigmoid"), rng.standard_normal((3, 4))),
        (nn.Activation("relu"), rng.standard_normal((3, 4))),
        (nn.LSTM(3, 4, rng=rng), rng.standard_normal((2, 5, 3))),
        (nn.LSTM(3, 2, groups=3, rng=rng), rng.standard_normal((2, 4, 3))),
    ]


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(0)
    for layer, x in _random_layers(rng):
        y, cache = layer.forward(x)
        dx, grads = layer.backward(cache, np.zeros_like(y))
        assert not np.any(dx), layer
        assert all(not np.any(g) for g in grads.values()), layer


@pytest.mark.parametrize("seed", range(20))
def test_layer_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for layer, x in _random_layers(rng):
        err = layer_gradcheck(layer, x, seed)
        assert err < TOL, (layer, err)


# --- LSTM ---------------------------------------------------------------------


def test_lstm_zero_weights():
    params = nn.init_lstm_params(np.random.default_rng(0), 3, 4)
    params = {k: np.zeros_like(v) for k, v in params.items()}
    c_prev = np.array([[1.0, -2.0, 0.5, 4.0]])
    h, c, _ = nn.lstm_step(params, np.ones((1, 3)), np.full((1, 4), 0.3), c_prev)
    np.testing.assert_array_equal(c, 0.5 * c_prev)
    # output gate 0.5 times tanh(c)
    np.testing.assert_allclose(h, 0.5 * np.tanh(0.5 * c_prev))

    h, c, _ = nn.lstm_step(params, np.zeros((1, 3)), np.zeros((1, 4)), np.zeros((1, 4)))
    np.testing.assert_array_equal(h, 0.0)
    np.testing.assert_array_equal(c, 0.0)


def test_lstm_hidden_bounded():
    rng = np.random.default_rng(3)
    params = {k: 10 * v for k, v in nn.init_lstm_params(rng, 3, 5).items()}
    h, c, _ = nn.lstm_step(params, 50 * rng.standard_normal((4, 3)), rng.uniform(-1, 1, (4, 5)), rng.standard_normal((4, 5)))
    assert np.all(np.abs(h) < 1.0)
    assert np.all(np.isfinite(c))


@pytest.mark.parametrize("seed", range(20))
def test_lstm_step_gradients(seed):
    rng = np.random.default_rng(seed)
    params = nn.init_lstm_params(rng, 3, 4)
    params["b"] = rng.standard_normal(16) * 0.5
    x = rng.standard_normal((2, 3))
    h0 = rng.uniform(-0.9, 0.9, (2, 4))
    c0 = rng.standard_normal((2, 4))
    wh = rng.standard_normal((2, 4))
    wc = rng.standard_normal((2, 4))

    def loss():
        h, c, _ = nn.lstm_step(params, x, h0, c0)
        return float(np.sum(wh * h) + np.sum(wc * c))

    _, _, cache = nn.lstm_step(params, x, h0, c0)
    dx, dh0, dc0, grads = nn.lstm_step_backward(params, cache, wh, wc)
    assert max_relative_error(dx, numerical_gradient(loss, x)) < TOL
    assert max_relative_error(dh0, numerical_gradient(loss, h0)) < TOL
    assert max_relative_error(dc0, numerical_gradient(loss, c0)) < TOL
    for name in ("Wx", "Wh", "b"):
        assert max_relative_error(grads[name], numerical_gradient(loss, params[name])) < TOL, name


def test_grouped_lstm_equals_separate_cells():
    rng = np.random.default_rng(7)
    grouped = nn.init_lstm_params(rng, 3, 4, groups=3)
    X = rng.standard_normal((2, 6, 3))
    out, _ = nn.lstm_forward(grouped, X)
    for g in range(3):
        single = {k: v[g] for k, v in grouped.items()}
        ref, _ = nn.lstm_forward(single, X)
        np.testing.assert_allclose(out[g], ref, rtol=0, atol=1e-14)


def test_lstm_sequence_matches_stepwise():
    rng = np.random.default_rng(11)
    params = nn.init_lstm_params(rng, 2, 3)
    X = rng.standard_normal((4, 7, 2))
    out, _ = nn.lstm_forward(params, X)
    h = np.zeros((4, 3))
    c = np.zeros((4, 3))
    for t in range(7):
        h, c, _ = nn.lstm_step(params, X[:, t], h, c)
        np.testing.assert_allclose(out[:, t], h, atol=1e-14)


# --- shape properties ---------------------------------------------------------


@given(length=st.integers(1, 200), kernel=st.integers(1, 20), stride=st.integers(1, 6))
@settings(max_examples=100, deadline=None)
def test_output_length_formula(length, kernel, stride):
    x = np.zeros((1, 1, length))
    if length < kernel:
        with pytest.raises(nn.ShapeError):
            nn.Conv1D(1, 1, kernel, stride).forward(x)
        return
    expected = (length - kernel) // stride + 1
    assert nn.Conv1D(1, 2, kernel, stride)(x).shape == (1, 2, expected)
    assert nn.MaxPool1D(kernel, stride)(x).shape == (1, 1, expected)


def test_forward_is_pure():
    rng = np.random.default_rng(5)
    for layer, x in _random_layers(rng):
        before = {k: v.copy() for k, v in layer.params.items()}
        a = layer(x)
        b = layer(x)
        assert a.tobytes() == b.tobytes()
        for k in before:
            assert before[k].tobytes() == layer.params[k].tobytes()


# --- Adam ---------------------------------------------------------------------


def test_adam_zero_gradient_identity():
    params = {"w": np.array([1.0, -2.0, 3.5])}
    state = nn.AdamState(lr=0.1)
    out = params
    for _ in range(5):
        out = nn.adam_step(state, out, {"w": np.zeros(3)})
    np.testing.assert_array_equal(out["w"], params["w"])
    assert state.step == 5


@pytest.mark.parametrize("g", [3.0, -0.25, 1e-3])
def test_adam_first_step_is_lr_sign(g):
    state = nn.AdamState(lr=0.01)
    out = nn.adam_step(state, {"w": np.array([0.5])}, {"w": np.array([g])})
    # bias-corrected first step: -lr * g / (|g| + eps)
    assert out["w"][0] == pytest.approx(0.5 - 0.01 * math.copysign(1.0, g), abs=1e-6)


def _scalar_adam_trace(x, steps, lr=0.1, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    xs = []
    for t in range(1, steps + 1):
        g = 2.0 * (x - 3.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        xs.append(x)
    return xs


def test_adam_matches_scalar_trace_on_quadratic():
    expected = _scalar_adam_trace(0.0, 2)
    state = nn.AdamState(lr=0.1)
    p = {"x": np.array(0.0)}
    got = []
    for _ in range(2):
        p = nn.adam_step(state, p, {"x": 2.0 * (p["x"] - 3.0)})
        got.append(float(p["x"]))
    assert got == pytest.approx(expected, abs=1e-15)


def test_adam_rejects_non_finite():
    with pytest.raises(nn.NonFiniteError):
        nn.adam_step(nn.AdamState(), {"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])})


# --- serialization --------------------------------------------------------------


def test_dyfw_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    layers = [
        ("enc.conv", nn.Conv1D(1, 4, 5, rng=rng)),
        ("enc.pool", nn.MaxPool1D(2)),
        ("enc.act", nn.Activation("tanh")),
        ("head", nn.Dense(6, 2, rng=rng)),
        ("lstm", nn.LSTM(3, 4, groups=2, rng=rng)),
    ]
    path = tmp_path / "m.dyfw"
    serialize.save(path, layers, {"beta": 1e-3})
    raw = path.read_bytes()
    assert raw[:4] == b"DYFW"
    loaded, hyper = serialize.load(path)
    assert hyper == {"beta": 1e-3}
    assert [n for n, _ in loaded] == [n for n, _ in layers]
    for (_, a), (_, b) in zip(layers, loaded):
        assert a.spec() == b.spec()
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()
    assert serialize.dumps(loaded) == raw


def test_dyfw_rejects_garbage():
    with pytest.raises(serialize.FormatError):
        serialize.loads(b"NOPE" + b"\0" * 10)
    good = serialize.dumps([("d", nn.Dense(2, 2))])
    with pytest.raises(serialize.FormatError):
        serialize.loads(good[:-3])
