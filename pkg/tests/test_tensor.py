import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anomsal import tensor as T
from oracles import conv3d_loops, numerical_grad, rel_error

rng = np.random.default_rng(7)


def test_conv_matches_loop_oracle():
    x = rng.normal(size=(2, 3, 4, 5, 3))
    k = rng.normal(size=(2, 3, 3, 3, 3))
    b = rng.normal(size=2)
    out, _ = T.conv3d_forward(x, k, b)
    np.testing.assert_allclose(out, conv3d_loops(x, k, b), rtol=0, atol=1e-12)


def test_conv_sum_of_ones_and_identity():
    x = np.ones((1, 1, 3, 3, 3))
    out, _ = T.conv3d_forward(x, np.ones((1, 1, 3, 3, 3)), np.zeros(1))
    assert out[0, 0, 1, 1, 1] == 27
    ident = np.zeros((1, 1, 3, 3, 3))
    ident[0, 0, 1, 1, 1] = 1
    y = rng.normal(size=(1, 1, 4, 4, 4))
    out, _ = T.conv3d_forward(y, ident, np.array([0.5]))
    np.testing.assert_allclose(out, y + 0.5)


def test_conv_rejects_mismatched_channels():
    with pytest.raises(ValueError, match="input channels"):
        T.conv3d_forward(np.zeros((1, 2, 4, 4, 4)), np.zeros((1, 3, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ValueError):
        T.conv3d_forward(np.zeros((2, 4, 4, 4)), np.zeros((1, 2, 3, 3, 3)), np.zeros(1))


def _check(f, x, analytic, tol=1e-4):
    assert rel_error(analytic, numerical_grad(f, x)) < tol


def test_conv_gradients():
    x = rng.normal(size=(2, 2, 3, 4, 3))
    k = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    r = rng.normal(size=(2, 3, 3, 4, 3))
    out, cache = T.conv3d_forward(x, k, b)
    gx, gk, gb = T.conv3d_backward(r, cache)

    def loss():
        return float(np.sum(T.conv3d_forward(x, k, b)[0] * r))

    _check(loss, x, gx)
    _check(loss, k, gk)
    _check(loss, b, gb)
    none, gk2, _ = T.conv3d_backward(r, cache, input_grad=False)
    assert none is None
    np.testing.assert_array_equal(gk, gk2)


def test_activation_gradients():
    x = rng.normal(size=(2, 3, 4)) * 3
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the leaky kink
    r = rng.normal(size=x.shape)
    _check(lambda: float(np.sum(T.leaky_relu(x) * r)), x, T.leaky_relu_backward(r, x))
    y = T.sigmoid(x)
    _check(lambda: float(np.sum(T.sigmoid(x) * r)), x, T.sigmoid_backward(r, y))


def test_resample_and_concat_gradients():
    x = rng.normal(size=(1, 2, 4, 4, 4))
    r = rng.normal(size=(1, 2, 2, 2, 2))
    _check(lambda: float(np.sum(T.resample_nn(x, 0.5) * r)), x, T.resample_nn_backward(r, 0.5))
    r2 = rng.normal(size=(1, 2, 8, 8, 8))
    _check(lambda: float(np.sum(T.resample_nn(x, 2.0) * r2)), x, T.resample_nn_backward(r2, 2.0))
    a = rng.normal(size=(1, 2, 2, 2, 2))
    b = rng.normal(size=(1, 3, 2, 2, 2))
    rc = rng.normal(size=(1, 5, 2, 2, 2))
    ga, gb = T.concat_channels_backward(rc, 2)
    _check(lambda: float(np.sum(T.concat_channels(a, b) * rc)), a, ga)
    _check(lambda: float(np.sum(T.concat_channels(a, b) * rc)), b, gb)


def test_resample_is_nearest_neighbour():
    x = np.arange(8.0).reshape(1, 1, 2, 2, 2)
    up = T.resample_nn(x, 2.0)
    assert up.shape == (1, 1, 4, 4, 4)
    assert np.all(up[0, 0, 2:, :2, 2:] == x[0, 0, 1, 0, 1])
    np.testing.assert_array_equal(T.resample_nn(up, 0.5), x)


def test_sigmoid_is_stable_and_flushes():
    y = T.sigmoid(np.array([-1000.0, -50.0, 0.0, 50.0, 1000.0], dtype=np.float32))
    assert np.all(np.isfinite(y))
    assert y[0] == 0.0 and y[-1] == 1.0 and y[2] == 0.5
    tiny = np.finfo(np.float32).tiny
    assert not np.any((np.abs(y) < tiny) & (y != 0))


def test_adam_first_steps_by_hand():
    p = {"w": np.array([1.0, -2.0])}
    st_ = T.AdamState(lr=0.1, beta1=0.0, beta2=0.999, eps=1e-8)
    g1 = np.array([0.5, -0.25])
    T.adam_step(p, {"w": g1}, st_)
    # with beta1 = 0 the first bias-corrected step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p["w"], [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 0.25 / (0.25 + 1e-8)])
    g2 = np.array([1.0, 0.0])
    before = p["w"].copy()
    T.adam_step(p, {"w": g2}, st_)
    v = 0.999 * (0.001 * g1 ** 2) + 0.001 * g2 ** 2
    vhat = v / (1 - 0.999 ** 2)
    np.testing.assert_allclose(p["w"], before - 0.1 * g2 / (np.sqrt(vhat) + 1e-8), rtol=1e-14)
    assert st_.t == 2


def test_adam_with_momentum_matches_formula():
    p = {"w": np.array([0.3])}
    s = T.AdamState(lr=0.01, beta1=0.9, beta2=0.99)
    m = v = 0.0
    w = 0.3
    for t, g in enumerate([0.2, -0.1, 0.4], start=1):
        T.adam_step(p, {"w": np.array([g])}, s)
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        w -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.99 ** t)) + 1e-8)
    assert p["w"][0] == pytest.approx(w, rel=1e-14)


def test_adam_zero_lr_keeps_params():
    p = {"w": rng.normal(size=5).astype(np.float32)}
    ref = p["w"].copy()
    T.adam_step(p, {"w": rng.normal(size=5).astype(np.float32)}, T.AdamState(lr=0.0))
    np.testing.assert_array_equal(p["w"], ref)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        T.adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, T.AdamState())


@given(st.lists(st.integers(1, 3), min_size=0, max_size=3), st.sampled_from([np.float32, np.float64, np.int64]))
def test_checkpoint_round_trip(shape, dtype):
    arr = (np.arange(int(np.prod(shape)) if shape else 1) * 3 - 2).astype(dtype).reshape(shape)
    data = T.pack_tensors({"a": arr, "b.c": np.ones(2, np.float32)}, {"n": "16", "w": "0.5"})
    tensors, meta = T.unpack_tensors(data)
    assert meta == {"n": "16", "w": "0.5"}
    assert tensors["a"].dtype == arr.dtype
    np.testing.assert_array_equal(tensors["a"], arr)
    assert T.pack_tensors(tensors, meta) == data


def test_checkpoint_errors(tmp_path):
    with pytest.raises(ValueError, match="magic"):
        T.unpack_tensors(b"NOTACKPT" + bytes(8))
    with pytest.raises(TypeError):
        T.pack_tensors({"x": np.zeros(2, np.int16)})
    path = tmp_path / "c.bin"
    T.save_tensors(path, {"x": np.arange(3.0)})
    np.testing.assert_array_equal(T.load_tensors(path)[0]["x"], np.arange(3.0))
