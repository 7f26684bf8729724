import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from statn.errors import ConfigurationError, InputError
from statn.tensor_core import (
    LayerSpec, Param, build_sequential, conv2d, conv2d_backward, finite_diff_check,
    fully_connected, maxpool, maxpool_backward, relu, relu_backward, sgd_step,
    softmax_cross_entropy,
)


def conv_oracle(x, w, b, stride, pad):
    """Nested-loop cross-correlation."""
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    xp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, ho, wo, cout))
    for a in range(n):
        for i in range(ho):
            for j in range(wo):
                for o in range(cout):
                    acc = b[o]
                    for di in range(kh):
                        for dj in range(kw):
                            for c in range(cin):
                                acc += xp[a, i * stride + di, j * stride + dj, c] * w[di, dj, c, o]
                    out[a, i, j, o] = acc
    return out


# -- Param / LayerSpec --------------------------------------------------------

def test_param_grad_matches_value_shape():
    p = Param(np.ones((3, 2)))
    assert p.grad.shape == (3, 2) and not p.grad.any()


def test_stiefel_param_must_be_tall():
    with pytest.raises(ConfigurationError):
        Param(np.eye(3), constraint="stiefel")
    with pytest.raises(ConfigurationError):
        Param(np.ones(4), constraint="stiefel")
    Param(np.eye(4)[:, :2], constraint="stiefel")


def test_unknown_constraint_rejected():
    with pytest.raises(ConfigurationError):
        Param(np.ones(2), constraint="sphere")


def test_layerspec_roundtrip():
    spec = LayerSpec("conv", out_channels=4, kernel=5, stride=2)
    assert LayerSpec.from_dict(spec.to_dict()) == spec


# -- conv2d ---------------------------------------------------------------------

def test_conv_identity_1x1():
    x = np.array([[[[2.5]]]])
    out, _ = conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    assert out[0, 0, 0, 0] == 2.5


def test_conv_zero_weights_gives_bias():
    x = np.random.default_rng(0).random((2, 5, 5, 3))
    out, _ = conv2d(x, np.zeros((3, 3, 3, 2)), np.array([0.7, -1.0]), pad=1)
    assert np.all(out[..., 0] == 0.7) and np.all(out[..., 1] == -1.0)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_nested_loop_oracle(rng, stride, pad):
    x = rng.standard_normal((2, 5, 5, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    out, _ = conv2d(x, w, b, stride, pad)
    np.testing.assert_allclose(out, conv_oracle(x, w, b, stride, pad), rtol=0, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ConfigurationError):
        conv2d(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 1)), np.zeros(1))


def test_conv_kernel_too_large():
    with pytest.raises(ConfigurationError):
        conv2d(np.zeros((1, 2, 2, 1)), np.zeros((3, 3, 1, 1)), np.zeros(1))


def test_conv_backward_finite_differences(rng):
    x = rng.standard_normal((1, 4, 5, 2))
    w = rng.standard_normal((3, 3, 2, 2))
    b = rng.standard_normal(2)
    g = rng.standard_normal((1, 2, 3, 2))

    def op(x, w, b):
        out, cols = conv2d(x, w, b, stride=2, pad=1)
        dx, dw, db = conv2d_backward(g, x.shape, cols, w, stride=2, pad=1)
        return float((out * g).sum()), (dx, dw, db)

    assert finite_diff_check(op, [x, w, b]) < 1e-8


def test_conv_backward_skips_input_grad(rng):
    x = rng.standard_normal((1, 4, 4, 1))
    w = rng.standard_normal((3, 3, 1, 1))
    out, cols = conv2d(x, w, np.zeros(1), pad=1)
    dx, dw, db = conv2d_backward(np.ones_like(out), x.shape, cols, w, pad=1, need_input_grad=False)
    assert dx is None and dw.shape == w.shape and db.shape == (1,)


@given(a=st.floats(-3, 3), c=st.floats(-3, 3), seed=st.integers(0, 2 ** 16))
def test_conv_and_fc_are_linear(a, c, seed):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((2, 1, 4, 4, 2))
    w = r.standard_normal((3, 3, 2, 2))
    zero = np.zeros(2)
    lhs = conv2d(a * x + c * y, w, zero, pad=1)[0]
    rhs = a * conv2d(x, w, zero, pad=1)[0] + c * conv2d(y, w, zero, pad=1)[0]
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
    wf = r.standard_normal((5, 3))
    u, v = r.standard_normal((2, 5))
    np.testing.assert_allclose(fully_connected(a * u + c * v, wf, np.zeros(3)),
                               a * fully_connected(u, wf, np.zeros(3))
                               + c * fully_connected(v, wf, np.zeros(3)), atol=1e-10)


# -- relu / maxpool / fc ----------------------------------------------------------

def test_relu_values():
    assert relu(np.array(-2.0)) == 0.0 and relu(np.array(3.0)) == 3.0
    np.testing.assert_array_equal(relu_backward(np.ones(3), np.array([-1.0, 0.0, 2.0])), [0, 0, 1])


def test_maxpool_constant_map():
    out, _ = maxpool(np.full((1, 4, 6, 2), 1.5), 2)
    assert out.shape == (1, 2, 3, 2) and np.all(out == 1.5)


def test_maxpool_tie_routes_to_first_element():
    x = np.ones((1, 2, 2, 1))
    out, arg = maxpool(x, 2)
    dx = maxpool_backward(np.array([[[[5.0]]]]), x.shape, arg, 2)
    np.testing.assert_array_equal(dx[0, :, :, 0], [[5.0, 0.0], [0.0, 0.0]])


def test_maxpool_matches_loop_oracle(rng):
    x = rng.standard_normal((2, 5, 6, 3))
    out, _ = maxpool(x, 2)
    for i in range(2):
        for j in range(3):
            np.testing.assert_array_equal(out[:, i, j], x[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(1, 2)))


def test_maxpool_window_too_large():
    with pytest.raises(ConfigurationError):
        maxpool(np.zeros((1, 2, 2, 1)), 3)


def test_fc_identity_passthrough(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(fully_connected(x, np.eye(4), np.zeros(4)), x)


def test_fc_gradient_is_exact_for_linear_map(rng):
    x = rng.standard_normal((2, 4))
    w = rng.standard_normal((4, 3))
    b = rng.standard_normal(3)
    g = rng.standard_normal((2, 3))

    def op(x, w, b):
        return float((fully_connected(x, w, b) * g).sum()), (g @ w.T, x.T @ g, g.sum(0))

    assert finite_diff_check(op, [x, w, b]) < 1e-9


# -- softmax cross-entropy -----------------------------------------------------------

def test_uniform_logits_give_log_c():
    loss, _ = softmax_cross_entropy(np.zeros((1, 7)), [3])
    assert loss == pytest.approx(math.log(7), abs=1e-15)


def test_extreme_logits_do_not_overflow():
    loss, grad = softmax_cross_entropy(np.array([[1000.0, -1000.0]]), [0])
    assert loss == pytest.approx(0.0, abs=1e-300) and np.all(np.isfinite(grad))


def test_single_example_gradient_is_softmax_minus_onehot(rng):
    z = rng.standard_normal(5)
    _, grad = softmax_cross_entropy(z[None], [2])
    p = np.exp(z - z.max())
    p /= p.sum()
    p[2] -= 1
    np.testing.assert_allclose(grad[0], p, atol=1e-15)


def test_softmax_matches_high_precision_oracle(rng):
    mpmath.mp.dps = 50
    for _ in range(20):
        z = rng.standard_normal(6) * 5
        label = int(rng.integers(6))
        loss, _ = softmax_cross_entropy(z[None], [label])
        exact = mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(v)) for v in z)) - mpmath.mpf(z[label])
        assert abs(loss - float(exact)) < 1e-12


@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)),
       st.lists(st.integers(0, 3), min_size=3, max_size=3))
def test_softmax_gradient_rows_sum_to_zero(logits, labels):
    loss, grad = softmax_cross_entropy(logits, labels)
    assert loss >= 0
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)


def test_softmax_label_out_of_range():
    with pytest.raises(InputError):
        softmax_cross_entropy(np.zeros((1, 3)), [3])
    with pytest.raises(InputError):
        softmax_cross_entropy(np.zeros((1, 3)), [-1])


# -- Sequential / SGD / checker -----------------------------------------------------------

def test_build_sequential_shapes_and_zero_head(rng):
    specs = [LayerSpec("conv", out_channels=4), LayerSpec("relu"), LayerSpec("maxpool", window=2),
             LayerSpec("fc", units=6, zero_init=True)]
    net = build_sequential(specs, (8, 8, 3), rng)
    assert net.output_shape == (6,)
    out = net.forward(rng.random((2, 8, 8, 3)))
    assert out.shape == (2, 6) and not out.any()


def test_sequential_backward_matches_finite_differences(rng):
    specs = [LayerSpec("conv", out_channels=2), LayerSpec("relu"), LayerSpec("fc", units=3)]
    net = build_sequential(specs, (4, 4, 1), rng)
    x = rng.random((2, 4, 4, 1))
    g = rng.standard_normal((2, 3))
    params = net.params()

    def op(*values):
        for p, v in zip(params, values):
            p.value = v
            p.zero_grad()
        out = net.forward(x)
        net.backward(g)
        return float((out * g).sum()), [p.grad.copy() for p in params]

    # ReLU inputs of this draw sit far from zero at eps = 1e-6
    assert finite_diff_check(op, [p.value.copy() for p in params], epsilon=1e-6) < 1e-6


def test_unknown_layer_kind(rng):
    with pytest.raises(ConfigurationError):
        build_sequential([LayerSpec("dropout")], (4,), rng)


def test_sgd_step():
    p = Param(np.array([1.0, 2.0]), learning_rate=0.5)
    p.grad[:] = [2.0, -4.0]
    sgd_step(p)
    np.testing.assert_array_equal(p.value, [0.0, 4.0])


def test_sgd_decreases_quadratic_monotonically():
    p = Param(np.array([3.0, -2.0]), learning_rate=0.1)
    prev = np.inf
    for _ in range(50):
        p.grad = 2 * p.value
        loss = float(p.value @ p.value)
        assert loss < prev
        prev = loss
        sgd_step(p)


def test_finite_diff_check_detects_wrong_gradient():
    def op(x):
        return float((x ** 2).sum()), (3 * x,)
    assert finite_diff_check(op, [np.array([1.0, 2.0])]) > 0.3
