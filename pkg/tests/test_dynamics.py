import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vmdnn.dynamics import (ACT_A, ACT_B, LeakyConvLevel, LeakyDenseLevel, activation, activation_derivative,
                            conv_output_size, conv_step, correlate, correlate_input_grad, correlate_kernel_grad,
                            dense_step, leak)
from vmdnn.errors import ConfigError


def naive_correlate(x, k, stride):
    b, c, w, h = x.shape
    m, _, kw, kh = k.shape
    ow, oh = (w - kw) // stride + 1, (h - kh) // stride + 1
    out = np.zeros((b, m, ow, oh))
    for n in range(b):
        for j in range(m):
            for p in range(ow):
                for q in range(oh):
                    patch = x[n, :, p * stride:p * stride + kw, q * stride:q * stride + kh]
                    out[n, j, p, q] = np.sum(patch * k[j])
    return out


def test_activation_constants_against_high_precision():
    mpmath.mp.dps = 40
    f1 = ACT_A * mpmath.tanh(mpmath.mpf(ACT_B))
    assert abs(activation(1.0) - float(f1)) < 1e-15
    assert abs(activation(1.0) - 1.0) <= 1e-3
    assert abs(activation_derivative(0.0) - 1.7159 * 0.6667) <= 1e-6


@given(st.floats(-6, 6))
def test_activation_derivative_matches_central_difference(x):
    h = 1e-6
    num = (activation(x + h) - activation(x - h)) / (2 * h)
    assert abs(activation_derivative(x) - num) < 1e-7


def test_activation_is_odd_and_bounded():
    xs = np.linspace(-50, 50, 1001)
    assert np.allclose(activation(-xs), -activation(xs))
    assert np.all(np.abs(activation(xs)) <= ACT_A)


def test_conv_output_size():
    assert conv_output_size(64, 22, 2) == 22
    assert conv_output_size(48, 14, 2) == 18
    with pytest.raises(ConfigError):
        conv_output_size(10, 4, 4)
    with pytest.raises(ConfigError):
        conv_output_size(3, 5, 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 3),
       st.integers(0, 4), st.integers(0, 3), st.integers(0, 2**16))
def test_correlate_matches_loop_oracle(b, c, m, kw, stride, nx, ny, seed):
    kh = max(1, kw - 1)
    w, h = kw + nx * stride, kh + ny * stride
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(b, c, w, h))
    k = rng.normal(size=(m, c, kw, kh))
    assert np.allclose(correlate(x, k, stride), naive_correlate(x, k, stride))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 5), st.integers(0, 2**16))
def test_correlate_gradients_are_adjoint(kw, stride, n, seed):
    rng = np.random.default_rng(seed)
    kh = kw + 1
    x = rng.normal(size=(2, 2, kw + n * stride, kh + n * stride))
    k = rng.normal(size=(3, 2, kw, kh))
    d = rng.normal(size=correlate(x, k, stride).shape)
    inner = np.sum(d * correlate(x, k, stride))
    assert np.isclose(inner, np.sum(correlate_input_grad(d, k, x.shape, stride) * x))
    assert np.isclose(inner, np.sum(correlate_kernel_grad(x, d, kw, kh, stride) * k))


def test_leak_blend():
    assert leak(2.0, 4.0, 1.0) == 4.0
    assert np.isclose(leak(2.0, 4.0, 4.0), 2.5)


@given(st.floats(1.0, 500.0), st.floats(-10, 10), st.floats(-10, 10))
def test_leak_step_bound(tau, u, drive):
    # |u' - u| = |drive - u| / tau
    assert abs(leak(u, drive, tau) - u) <= abs(drive - u) / tau + 1e-12


def test_dense_step_example():
    w = np.array([[1.0, 0.0], [0.0, 2.0]])
    level = LeakyDenseLevel(2, 2.0, [("x", w)], np.array([0.5, 0.0]))
    u = dense_step(np.zeros(2), [np.array([1.0, 1.0])], level)
    assert np.allclose(u, [0.75, 1.0])


def test_dense_level_rejects_bad_shapes():
    with pytest.raises(ConfigError):
        LeakyDenseLevel(3, 2.0, [("x", np.zeros((2, 4)))])
    with pytest.raises(ConfigError):
        LeakyDenseLevel(3, 0.5)
    level = LeakyDenseLevel(2, 2.0, [("x", np.zeros((2, 3)))])
    with pytest.raises(ConfigError):
        dense_step(np.zeros(2), [np.zeros(4)], level)


def test_conv_step_batched_equals_unbatched():
    rng = np.random.default_rng(0)
    level = LeakyConvLevel(2, 3.0, rng.normal(size=(2, 1, 3, 3)), 1, np.array([0.1, -0.2]))
    src = rng.normal(size=(3, 1, 6, 5))
    u0 = rng.normal(size=(3, 2, 4, 3))
    batched = conv_step(u0, src, level)
    for i in range(3):
        assert np.allclose(batched[i], conv_step(u0[i], src[i], level))
    assert level.output_geometry(6, 5) == (4, 3)
