import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_difference, conv2d_direct, rel_error
from sslband.errors import ConfigError, NumericalError
from sslband.tensor_core import (
    BatchNorm,
    Conv2d,
    FilterBank4,
    RunningStats,
    batchnorm,
    batchnorm_backward,
    conv2d,
    conv2d_backward,
    fully_connected,
    fully_connected_backward,
    global_avg_pool,
    global_avg_pool_backward,
    maxpool2,
    maxpool2_backward,
    relu,
    relu_backward,
    softmax,
)

GRAD_TOL = 1e-5


# ---------------------------------------------------------------- conv2d


def test_conv_identity_kernel():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out, _ = conv2d(x, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(out, x)


def test_conv_zero_filters_give_zero(rng):
    out, _ = conv2d(rng.standard_normal((2, 3, 5, 5)), np.zeros((4, 3, 3, 3)), pad=1)
    assert out.shape == (2, 4, 5, 5)
    assert not out.any()


def test_conv_matches_direct_sum_fixed_case(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((2, 2, 3, 3))
    out, _ = conv2d(x, w, pad=1)
    assert np.abs(out - conv2d_direct(x, w, pad=1)).max() < 1e-12


def test_conv_matches_direct_sum_50_random_shapes():
    r = np.random.default_rng(7)
    for _ in range(50):
        n, c, l = r.integers(1, 3), r.integers(1, 4), r.integers(1, 4)
        k = int(r.choice([1, 3, 5]))
        stride = int(r.integers(1, 3))
        pad = int(r.integers(0, k // 2 + 1))
        # pick extents the stride divides exactly
        ho, wo = r.integers(1, 5, size=2)
        h = (ho - 1) * stride + k - 2 * pad
        wd = (wo - 1) * stride + k - 2 * pad
        if h < 1 or wd < 1:
            continue
        x = r.standard_normal((n, c, h, wd))
        w = r.standard_normal((l, c, k, k))
        out, _ = conv2d(x, w, stride=stride, pad=pad)
        assert np.abs(out - conv2d_direct(x, w, stride, pad)).max() < 1e-12


def test_conv_channel_mismatch_is_config_error(rng):
    with pytest.raises(ConfigError):
        conv2d(rng.standard_normal((1, 3, 4, 4)), rng.standard_normal((2, 2, 3, 3)))


def test_conv_incompatible_stride_is_config_error(rng):
    with pytest.raises(ConfigError):
        conv2d(rng.standard_normal((1, 1, 4, 4)), rng.standard_normal((1, 1, 3, 3)), stride=2)


def test_conv_backward_zero_upstream(rng):
    out, cache = conv2d(rng.standard_normal((2, 2, 4, 4)), rng.standard_normal((3, 2, 3, 3)), pad=1)
    gx, gw, gb = conv2d_backward(np.zeros_like(out), cache)
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_sum_loss_small_case(rng):
    x = rng.standard_normal((1, 1, 3, 3))
    w = rng.standard_normal((1, 1, 2, 2))
    out, cache = conv2d(x, w)
    gx, gw, _ = conv2d_backward(np.ones_like(out), cache)
    assert rel_error(gx, central_difference(lambda a: conv2d(a, w)[0].sum(), x.copy())) < 1e-6
    assert rel_error(gw, central_difference(lambda a: conv2d(x, a)[0].sum(), w.copy())) < 1e-6


@given(st.floats(-3, 3, allow_nan=False), st.integers(0, 2**31 - 1))
def test_conv_backward_is_linear_in_upstream(a, seed):
    r = np.random.default_rng(seed)
    out, cache = conv2d(r.standard_normal((1, 2, 4, 4)), r.standard_normal((2, 2, 3, 3)), pad=1)
    g = r.standard_normal(out.shape)
    scaled = conv2d_backward(a * g, cache)
    base = conv2d_backward(g, cache)
    for s, b in zip(scaled, base):
        np.testing.assert_allclose(s, a * b, rtol=1e-12, atol=1e-12)


def test_filter_bank_validates_shape():
    with pytest.raises(ConfigError):
        FilterBank4(np.zeros((2, 3, 3)))
    with pytest.raises(ConfigError):
        FilterBank4(np.zeros((2, 3, 3, 2)))
    fb = FilterBank4(np.zeros((4, 5, 3, 3)))
    assert (fb.num_filters, fb.num_channels, fb.kernel_size) == (4, 5, 3)
    assert fb.grad.shape == fb.weights.shape


def test_conv_layer_bank_is_live(rng):
    layer = Conv2d(rng.standard_normal((2, 3, 3, 3)))
    layer.bank.weights[0, 0, 0, 0] = 42.0
    assert layer.params["weight"][0, 0, 0, 0] == 42.0


# ---------------------------------------------------------------- pointwise, pooling


def test_relu_values():
    out, _ = relu(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out, [0.0, 0.0, 2.0])


def test_relu_all_negative():
    out, _ = relu(-np.arange(1.0, 5.0))
    assert not out.any()


def test_relu_gradient_is_zero_at_kink():
    np.testing.assert_array_equal(relu_backward(np.ones(3), np.array([-1.0, 0.0, 1.0])), [0.0, 0.0, 1.0])


def test_maxpool_first_index_wins_ties():
    x = np.ones((1, 1, 2, 2))
    out, cache = maxpool2(x)
    g = maxpool2_backward(np.ones_like(out), cache)
    np.testing.assert_array_equal(g[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_values(rng):
    x = rng.standard_normal((2, 3, 4, 6))
    out, _ = maxpool2(x)
    ref = x.reshape(2, 3, 2, 2, 3, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(out, ref)


def test_maxpool_odd_extent_rejected():
    with pytest.raises(ConfigError):
        maxpool2(np.zeros((1, 1, 3, 4)))


def test_softmax_rows_sum_to_one_and_are_shift_invariant(rng):
    z = rng.standard_normal((5, 7)) * 50
    p = softmax(z)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-12)
    np.testing.assert_allclose(softmax(z + 1000.0), p, rtol=1e-10)


def test_nonfinite_activation_is_numerical_error():
    with pytest.raises(NumericalError):
        conv2d(np.full((1, 1, 2, 2), np.inf), np.ones((1, 1, 1, 1)))


# ---------------------------------------------------------------- batch norm


def test_batchnorm_train_normalizes_and_updates_running(rng):
    x = rng.standard_normal((8, 3, 4, 4)) * 3 + 5
    running = RunningStats(np.zeros(3), np.ones(3))
    out, _ = batchnorm(x, np.ones(3), np.zeros(3), running, train=True)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, rtol=1e-3)
    np.testing.assert_allclose(running.mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(running.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))


def test_batchnorm_eval_uses_running_stats(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    running = RunningStats(np.array([1.0, -1.0]), np.array([4.0, 0.25]))
    out, _ = batchnorm(x, np.ones(2), np.zeros(2), running, train=False)
    ref = (x - running.mean.reshape(1, 2, 1, 1)) / np.sqrt(running.var.reshape(1, 2, 1, 1) + 1e-5)
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_batchnorm_layer_single_sample_rejected(rng):
    with pytest.raises(ConfigError):
        BatchNorm(2).forward(rng.standard_normal((1, 2)), train=True)


# ---------------------------------------------------------------- gradient checks
# each op: 10 random instances, 64-bit, central differences with h = 1e-5


def _check(loss_of, analytic, x):
    num = central_difference(loss_of, x.copy())
    assert rel_error(analytic, num) < GRAD_TOL


@pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1)])
def test_conv_gradients(stride, pad):
    r = np.random.default_rng(stride * 10 + pad)
    for _ in range(10):
        x = r.standard_normal((2, 2, 5, 5))
        w = r.standard_normal((3, 2, 3, 3))
        b = r.standard_normal(3)
        out, cache = conv2d(x, w, b, stride=stride, pad=pad)
        up = r.standard_normal(out.shape)
        gx, gw, gb = conv2d_backward(up, cache)
        _check(lambda a: (conv2d(a, w, b, stride, pad)[0] * up).sum(), gx, x)
        _check(lambda a: (conv2d(x, a, b, stride, pad)[0] * up).sum(), gw, w)
        _check(lambda a: (conv2d(x, w, a, stride, pad)[0] * up).sum(), gb, b)


def test_relu_gradient_away_from_kinks():
    r = np.random.default_rng(1)
    for _ in range(10):
        x = r.standard_normal((3, 4))
        x = np.where(np.abs(x) < 0.1, 0.5, x)
        up = r.standard_normal(x.shape)
        _check(lambda a: (relu(a)[0] * up).sum(), relu_backward(up, x), x)


def test_maxpool_gradient():
    r = np.random.default_rng(2)
    for _ in range(10):
        # distinct values spaced well beyond h so the argmax cannot flip
        x = r.permutation(2 * 2 * 4 * 4).reshape(2, 2, 4, 4) * 0.01
        out, cache = maxpool2(x)
        up = r.standard_normal(out.shape)
        _check(lambda a: (maxpool2(a)[0] * up).sum(), maxpool2_backward(up, cache), x.astype(np.float64))


def test_global_avg_pool_gradient():
    r = np.random.default_rng(3)
    for _ in range(10):
        x = r.standard_normal((2, 3, 4, 4))
        out, shape = global_avg_pool(x)
        up = r.standard_normal(out.shape)
        _check(lambda a: (global_avg_pool(a)[0] * up).sum(), global_avg_pool_backward(up, shape), x)


def test_fully_connected_gradients():
    r = np.random.default_rng(4)
    for _ in range(10):
        x, w, b = r.standard_normal((4, 5)), r.standard_normal((5, 3)), r.standard_normal(3)
        out, cache = fully_connected(x, w, b)
        up = r.standard_normal(out.shape)
        gx, gw, gb = fully_connected_backward(up, cache)
        _check(lambda a: (fully_connected(a, w, b)[0] * up).sum(), gx, x)
        _check(lambda a: (fully_connected(x, a, b)[0] * up).sum(), gw, w)
        _check(lambda a: (fully_connected(x, w, a)[0] * up).sum(), gb, b)


@pytest.mark.parametrize("train", [True, False])
@pytest.mark.parametrize("shape", [(4, 3), (3, 2, 3, 3)])
def test_batchnorm_gradients(train, shape):
    r = np.random.default_rng(5)
    c = shape[1]
    for _ in range(10):
        x = r.standard_normal(shape)
        gamma, beta = r.standard_normal(c), r.standard_normal(c)
        stats = RunningStats(r.standard_normal(c), r.uniform(0.5, 2, c))

        def f(xx, gg, bb):
            # fresh copy of the running stats so probing never mutates them
            return batchnorm(xx, gg, bb, RunningStats(stats.mean.copy(), stats.var.copy()), train)[0]

        out = f(x, gamma, beta)
        up = r.standard_normal(out.shape)
        _, cache = batchnorm(x, gamma, beta, RunningStats(stats.mean.copy(), stats.var.copy()), train)
        gx, gg, gb = batchnorm_backward(up, cache)
        _check(lambda a: (f(a, gamma, beta) * up).sum(), gx, x)
        _check(lambda a: (f(x, a, beta) * up).sum(), gg, gamma)
        _check(lambda a: (f(x, gamma, a) * up).sum(), gb, beta)


# ---------------------------------------------------------------- dtypes


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_ops_preserve_dtype(dtype, rng):
    x = rng.standard_normal((2, 2, 4, 4)).astype(dtype)
    w = rng.standard_normal((3, 2, 3, 3)).astype(dtype)
    out, cache = conv2d(x, w, pad=1)
    assert out.dtype == dtype
    assert all(g.dtype == dtype for g in conv2d_backward(out, cache))
    assert maxpool2(out)[0].dtype == dtype
    bn = BatchNorm(3, dtype)
    assert bn.forward(out, train=True).dtype == dtype
