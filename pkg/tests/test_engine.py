import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from locseg import engine as E
from locseg.errors import ShapeError, ValidationError


def loop_conv(x, w, b):
    """Plain-loop oracle for a single-sample valid convolution."""
    c_out, c_in, k, _ = w.shape
    _, h, wd = x.shape
    out = np.zeros((c_out, h - k + 1, wd - k + 1))
    for o in range(c_out):
        for y in range(h - k + 1):
            for xx in range(wd - k + 1):
                out[o, y, xx] = b[o] + np.sum(x[:, y:y + k, xx:xx + k] * w[o])
    return out


def central_diff(f, arr, step=1e-5):
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        g.reshape(-1)[i] = (fp - fm) / (2 * step)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


# --- conv2d -----------------------------------------------------------------

def test_conv_sum_of_ones():
    out = E.conv2d_forward(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 9


def test_conv_first_layer_shape(rng):
    out = E.conv2d_forward(rng.random((2, 32, 32)), rng.random((20, 2, 7, 7)), np.zeros(20))
    assert out.shape == (20, 26, 26)


def test_full_stack_flattens_to_35640(rng):
    h = rng.random((2, 32, 32)).astype(np.float32)
    c_in = 2
    for c_out, k in ((20, 7), (40, 5), (80, 3), (110, 3)):
        h = E.relu(E.conv2d_forward(h, rng.standard_normal((c_out, c_in, k, k)).astype(np.float32) * 0.1,
                                    np.zeros(c_out, np.float32)))
        c_in = c_out
    assert h.shape == (110, 18, 18)
    assert h.size == 35640


@pytest.mark.parametrize("method", ["im2col", "direct"])
def test_conv_matches_loop_oracle(rng, method):
    x = rng.standard_normal((3, 9, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    assert np.allclose(E.conv2d_forward(x, w, b, method=method), loop_conv(x, w, b), atol=1e-12)


def test_conv_paths_agree_float32(rng):
    x = rng.standard_normal((5, 6, 20, 20)).astype(np.float32)
    w = rng.standard_normal((7, 6, 5, 5)).astype(np.float32)
    b = rng.standard_normal(7).astype(np.float32)
    a = E.conv2d_forward(x, w, b, method="im2col")
    d = E.conv2d_forward(x, w, b, method="direct")
    assert np.max(np.abs(a - d)) <= 1e-6 * max(1.0, np.max(np.abs(d)))


def test_conv_shape_errors_name_axis(rng):
    with pytest.raises(ShapeError, match="channel"):
        E.conv2d_forward(rng.random((3, 8, 8)), rng.random((2, 2, 3, 3)), np.zeros(2))
    with pytest.raises(ShapeError, match="height"):
        E.conv2d_forward(rng.random((2, 2, 8)), rng.random((2, 2, 3, 3)), np.zeros(2))
    with pytest.raises(ShapeError, match="width"):
        E.conv2d_forward(rng.random((2, 8, 2)), rng.random((2, 2, 3, 3)), np.zeros(2))
    with pytest.raises(ShapeError, match="bias"):
        E.conv2d_forward(rng.random((2, 8, 8)), rng.random((2, 2, 3, 3)), np.zeros(3))


def test_conv_backward_zero_upstream(rng):
    x = rng.random((2, 6, 6))
    w = rng.random((3, 2, 3, 3))
    gx, gw, gb = E.conv2d_backward(np.zeros((3, 4, 4)), x, w)
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_scalar_chain_rule():
    x = np.array([[[1.7]]])
    w = np.array([[[[-0.4]]]])
    g = np.array([[[2.5]]])
    gx, gw, gb = E.conv2d_backward(g, x, w)
    assert gw[0, 0, 0, 0] == pytest.approx(2.5 * 1.7)
    assert gx[0, 0, 0] == pytest.approx(2.5 * -0.4)
    assert gb[0] == pytest.approx(2.5)


def test_conv_backward_finite_differences(rng):
    x = rng.standard_normal((2, 8, 8))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    up = rng.standard_normal((3, 6, 6))

    def loss():
        return float(np.sum(E.conv2d_forward(x, w, b) * up))

    gx, gw, gb = E.conv2d_backward(up, x, w)
    assert rel_err(gw, central_diff(loss, w)) <= 1e-4
    assert rel_err(gx, central_diff(loss, x)) <= 1e-4
    assert rel_err(gb, central_diff(loss, b)) <= 1e-4


def test_conv_backward_rejects_wrong_upstream(rng):
    with pytest.raises(ShapeError):
        E.conv2d_backward(np.zeros((3, 5, 5)), rng.random((2, 8, 8)), rng.random((3, 2, 3, 3)))


# --- fully connected, relu, dropout --------------------------------------------

def test_fc_identity_and_hand_example(rng):
    x = rng.random(5)
    assert np.array_equal(E.fully_connected(x, np.eye(5), np.zeros(5)), x)
    out = E.fully_connected(np.array([1.0, 2.0]), np.array([[1.0, 1.0], [0.0, 1.0]]), np.array([0.0, 1.0]))
    assert out.tolist() == [3.0, 3.0]


def test_fc_length_mismatch():
    with pytest.raises(ShapeError):
        E.fully_connected(np.ones(3), np.ones((2, 4)), np.zeros(2))


def test_fc_gradients_finite_differences(rng):
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((3, 6))
    b = rng.standard_normal(3)
    up = rng.standard_normal((4, 3))

    def loss():
        return float(np.sum(E.fully_connected(x, w, b) * up))

    gx, gw, gb = E.fully_connected_backward(up, x, w)
    assert rel_err(gw, central_diff(loss, w)) <= 1e-4
    assert rel_err(gx, central_diff(loss, x)) <= 1e-4
    assert rel_err(gb, central_diff(loss, b)) <= 1e-4


def test_row_results_do_not_depend_on_batch(rng):
    x = rng.standard_normal((300, 100)).astype(np.float32)
    w = rng.standard_normal((64, 100)).astype(np.float32)
    b = np.zeros(64, np.float32)
    full = E.fully_connected(x, w, b)
    for n in (1, 3, 17):
        assert np.array_equal(E.fully_connected(x[:n], w, b), full[:n])


def test_relu_examples():
    assert E.relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]
    x = -np.ones(4)
    assert not E.relu(x).any()
    assert not E.relu_backward(np.ones(4), x).any()
    assert E.relu_backward(np.ones(3), np.array([-1.0, 0.0, 1.0])).tolist() == [0, 0, 1]


def test_relu_finite_differences_away_from_zero(rng):
    x = rng.standard_normal(50)
    x[np.abs(x) < 0.01] = 0.5
    up = rng.standard_normal(50)

    def loss():
        return float(np.sum(E.relu(x) * up))

    assert rel_err(E.relu_backward(up, x), central_diff(loss, x)) <= 1e-4


def test_dropout_modes(rng):
    x = rng.random(100)
    assert np.array_equal(E.dropout(x, 0.0, "train", rng), x)
    assert np.array_equal(E.dropout(x, 0.0, "infer"), x)
    assert np.array_equal(E.dropout(x, 0.7, "infer"), x)
    with pytest.raises(ValidationError):
        E.dropout(x, 1.0, "train", rng)


def test_dropout_mean_preserved(rng):
    out = E.dropout(np.ones(10**6), 0.3, "train", rng)
    assert abs(out.mean() - 1.0) < 0.01
    assert set(np.unique(out).round(6)) <= {0.0, round(1 / 0.7, 6)}


# --- softmax cross-entropy --------------------------------------------------------

def test_softmax_ce_symmetric():
    loss, p, _ = E.softmax_cross_entropy(np.array([0.0, 0.0]), 0)
    assert p.tolist() == [0.5, 0.5]
    assert loss == pytest.approx(math.log(2))


def test_softmax_ce_saturated_is_stable():
    loss, p, g = E.softmax_cross_entropy(np.array([20.0, -20.0]), 0)
    assert loss < 1e-8 and np.all(np.isfinite(g))
    loss, _, _ = E.softmax_cross_entropy(np.array([1000.0, -1000.0]), 1)
    assert np.isfinite(loss) and loss == pytest.approx(2000.0)


def test_softmax_ce_rejects_non_finite():
    with pytest.raises(ValidationError):
        E.softmax_cross_entropy(np.array([np.nan, 0.0]), 0)
    with pytest.raises(ShapeError):
        E.softmax_cross_entropy(np.zeros(3), 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-30, 30), st.floats(-30, 30), st.integers(0, 1))
def test_softmax_ce_properties(a, b, label):
    loss, p, g = E.softmax_cross_entropy(np.array([a, b]), label)
    assert abs(p.sum() - 1) <= 1e-12
    assert np.all(p >= 0) and np.all(p <= 1)
    assert loss >= 0
    onehot = np.eye(2)[label]
    assert np.allclose(g, p - onehot)


def test_softmax_ce_gradient_finite_differences(rng):
    z = rng.standard_normal(2) * 3

    def loss():
        return E.softmax_cross_entropy(z, 1)[0]

    assert rel_err(E.softmax_cross_entropy(z, 1)[2], central_diff(loss, z)) <= 1e-4


# --- initialisation and optimiser ---------------------------------------------------

def test_glorot_limit_first_layer():
    # fan_in = 2*7*7 = 98, fan_out = 20*7*7 = 980
    assert E.glorot_limit(98, 980) == pytest.approx(math.sqrt(6 / 1078), rel=1e-12)
    assert E.glorot_limit(98, 980) == pytest.approx(0.0746047, abs=1e-7)


def test_glorot_samples_bounded_and_centred(rng):
    lim = E.glorot_limit(98, 980)
    w = E.glorot_init((10**5,), 98, 980, rng, np.float64)
    assert np.all(np.abs(w) <= lim)
    assert abs(w.mean()) < 0.01 * lim
    with pytest.raises(ValidationError):
        E.glorot_init((3,), 0, 5, rng)


def _store(value, grad):
    s = E.ParameterStore()
    s.add("w", np.array(value, dtype=np.float64))
    s.grads["w"][...] = grad
    return s


def test_rmsprop_hand_step():
    s = _store([0.0], [1.0])
    E.rmsprop_step(s, 0.001, 0.9, 1e-8)
    assert s.accum["w"][0] == pytest.approx(0.1)
    assert s.params["w"][0] == pytest.approx(-0.001 / math.sqrt(0.1 + 1e-8), rel=1e-12)
    assert s.params["w"][0] == pytest.approx(-0.0031623, abs=1e-7)
    assert s.grads["w"][0] == 0


def test_rmsprop_zero_gradient_only_decays():
    s = _store([0.3, -2.0], [0.0, 0.0])
    s.accum["w"][...] = [0.5, 0.2]
    E.rmsprop_step(s)
    assert s.params["w"].tolist() == [0.3, -2.0]
    assert np.allclose(s.accum["w"], [0.45, 0.18])


def test_rmsprop_constant_gradient_step_tends_to_eta():
    s = _store([0.0], [0.0])
    prev = 0.0
    for _ in range(200):
        s.grads["w"][...] = 0.5
        E.rmsprop_step(s, 0.001, 0.9, 1e-8)
        step = prev - s.params["w"][0]
        prev = s.params["w"][0]
    assert step == pytest.approx(0.001 * 0.5 / math.sqrt(0.25 + 1e-8), rel=1e-6)


def test_rmsprop_rejects_bad_hyperparameters():
    s = _store([0.0], [1.0])
    with pytest.raises(ValidationError):
        E.rmsprop_step(s, learning_rate=0)
    with pytest.raises(ValidationError):
        E.rmsprop_step(s, decay=1.0)


# --- gradient check harness ------------------------------------------------------

def _linear_problem(rng, corrupt=False):
    store = E.ParameterStore()
    store.add("w", rng.standard_normal((2, 5)))
    store.add("b", rng.standard_normal(2))
    x = rng.standard_normal((7, 5))
    y = rng.standard_normal((7, 2))

    def loss_and_grad(with_grad):
        r = x @ store.params["w"].T + store.params["b"] - y
        loss = 0.5 * float(np.sum(r * r))
        if with_grad:
            sign = -1.0 if corrupt else 1.0
            store.grads["w"] += sign * r.T @ x
            store.grads["b"] += r.sum(axis=0)
        return loss

    return store, loss_and_grad


def test_gradient_check_linear_exact(rng):
    store, f = _linear_problem(rng)
    report = E.gradient_check(f, store, step=1e-5, tolerance=1e-9)
    assert report.passed, report.per_parameter


def test_gradient_check_catches_sign_flip(rng):
    store, f = _linear_problem(rng, corrupt=True)
    report = E.gradient_check(f, store, step=1e-5, tolerance=1e-4)
    assert not report.passed and report.max_error > 0.1


def test_gradient_check_needs_float64():
    s = E.ParameterStore()
    s.add("w", np.zeros(2, np.float32))
    with pytest.raises(ValidationError):
        E.gradient_check(lambda g: 0.0, s)


def test_layer_spec_has_no_pooling():
    assert "pool" not in " ".join(E.LAYER_KINDS)
    with pytest.raises(ValidationError):
        E.LayerSpec("max_pool", "p")
