import numpy as np
import pytest
from hypothesis import given, strategies as st

from bsen.nn import (AdamState, BatchNormLayer, ConvLayer, adam_step, batchnorm3d_backward,
                     batchnorm3d_forward, conv3d_backward, conv3d_forward, gradient_check,
                     maxpool3d_backward, maxpool3d_forward, relu_backward, relu_forward,
                     upsample_nearest_backward, upsample_nearest_forward)
from bsen.nn.layers import MissingCacheError


def conv_loops(x, w, b):
    """Reference convolution written directly from the definition."""
    B, C, X, Y, Z = x.shape
    O = w.shape[0]
    out = np.zeros((B, O, X, Y, Z))
    for n in range(B):
        for o in range(O):
            for i in range(X):
                for j in range(Y):
                    for k in range(Z):
                        acc = b[o]
                        for c in range(C):
                            for a in range(3):
                                for bb in range(3):
                                    for cc in range(3):
                                        ii, jj, kk = i + a - 1, j + bb - 1, k + cc - 1
                                        if 0 <= ii < X and 0 <= jj < Y and 0 <= kk < Z:
                                            acc += w[o, c, a, bb, cc] * x[n, c, ii, jj, kk]
                        out[n, o, i, j, k] = acc
    return out


def conv_layer(rng, cin, cout, dtype=np.float64, bias=True):
    layer = ConvLayer.create(cin, cout, rng, dtype)
    if bias:
        layer.bias[:] = rng.standard_normal(cout)
    else:
        layer.bias[:] = 0
    return layer


# -- conv ---------------------------------------------------------------------

@pytest.mark.parametrize("cin, cout", [(1, 3), (2, 3), (4, 2)])  # exercises both evaluation orders
def test_conv_matches_loops(rng, cin, cout):
    x = rng.standard_normal((2, cin, 5, 6, 7))
    layer = conv_layer(rng, cin, cout)
    out, _ = conv3d_forward(x, layer)
    assert np.max(np.abs(out - conv_loops(x, layer.weight, layer.bias))) < 1e-6


def test_conv_identity_and_ones():
    layer = ConvLayer(np.zeros((1, 1, 3, 3, 3)), np.zeros(1))
    layer.weight[0, 0, 1, 1, 1] = 1
    x = np.random.default_rng(0).standard_normal((1, 1, 4, 5, 6))
    assert np.array_equal(conv3d_forward(x, layer)[0], x)
    ones = ConvLayer(np.ones((1, 1, 3, 3, 3)), np.zeros(1))
    out = conv3d_forward(np.ones((1, 1, 3, 3, 3)), ones)[0][0, 0]
    assert out[1, 1, 1] == 27 and out[0, 0, 0] == 8


def test_conv_shape_full_grid(rng):
    layer = conv_layer(rng, 1, 1, np.float32)
    out, _ = conv3d_forward(np.zeros((1, 1, 64, 80, 64), np.float32), layer)
    assert out.shape == (1, 1, 64, 80, 64)


def test_conv_channel_mismatch(rng):
    with pytest.raises(ValueError, match="channel"):
        conv3d_forward(np.zeros((1, 2, 4, 4, 4)), conv_layer(rng, 3, 1))


@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 2 ** 31))
def test_conv_linearity_float32(a, b, seed):
    rng = np.random.default_rng(seed)
    layer = conv_layer(rng, 2, 3, np.float32, bias=False)
    x = rng.standard_normal((1, 2, 4, 4, 4)).astype(np.float32)
    y = rng.standard_normal((1, 2, 4, 4, 4)).astype(np.float32)
    lhs = conv3d_forward((np.float32(a) * x + np.float32(b) * y), layer)[0]
    rhs = np.float32(a) * conv3d_forward(x, layer)[0] + np.float32(b) * conv3d_forward(y, layer)[0]
    assert np.max(np.abs(lhs - rhs)) < 1e-6 * max(1.0, float(np.max(np.abs(rhs)))) * 10


@given(st.integers(0, 2 ** 31), st.integers(1, 3), st.integers(1, 3))
def test_conv_backward_is_adjoint(seed, cin, cout):
    rng = np.random.default_rng(seed)
    layer = conv_layer(rng, cin, cout, bias=False)
    x = rng.standard_normal((2, cin, 2, 4, 3))
    g = rng.standard_normal((2, cout, 2, 4, 3))
    out, cache = conv3d_forward(x, layer)
    dx, dw, db = conv3d_backward(g, cache)
    assert np.isclose(np.sum(out * g), np.sum(x * dx), rtol=1e-10, atol=1e-10)
    assert np.allclose(db, g.sum(axis=(0, 2, 3, 4)))


# -- pooling / upsampling -------------------------------------------------------

def pool_reference(x):
    B, C, X, Y, Z = x.shape
    blocks = x.reshape(B, C, X // 2, 2, Y // 2, 2, Z // 2, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    return blocks.reshape(B, C, X // 2, Y // 2, Z // 2, 8)


def test_maxpool_examples():
    out, _ = maxpool3d_forward(np.full((1, 1, 4, 4, 4), 3.0))
    assert out.shape == (1, 1, 2, 2, 2) and np.all(out == 3)
    block = np.arange(1.0, 9.0).reshape(1, 1, 2, 2, 2)
    assert maxpool3d_forward(block)[0].item() == 8
    assert maxpool3d_forward(np.zeros((1, 1, 64, 80, 64)))[0].shape == (1, 1, 32, 40, 32)
    with pytest.raises(ValueError):
        maxpool3d_forward(np.zeros((1, 1, 3, 4, 4)))


@given(st.integers(0, 2 ** 31))
def test_maxpool_matches_reference_and_routes_to_first_max(seed):
    rng = np.random.default_rng(seed)
    # few distinct values, so ties are common
    x = rng.integers(0, 3, size=(2, 2, 4, 2, 6)).astype(np.float64)
    out, cache = maxpool3d_forward(x)
    ref = pool_reference(x)
    assert np.array_equal(out, ref.max(-1))
    g = rng.standard_normal(out.shape)
    dx = maxpool3d_backward(g, cache)
    expect = np.zeros_like(ref)
    first = ref.argmax(-1)  # argmax returns the first maximal position
    np.put_along_axis(expect, first[..., None], g[..., None], axis=-1)
    assert np.array_equal(pool_reference(dx), expect)


def test_upsample_examples():
    out, _ = upsample_nearest_forward(np.full((1, 1, 1, 1, 1), 5.0))
    assert out.shape == (1, 1, 2, 2, 2) and np.all(out == 5)
    assert upsample_nearest_forward(np.zeros((1, 1, 8, 10, 8)))[0].shape == (1, 1, 16, 20, 16)


@given(st.integers(0, 2 ** 31))
def test_pool_after_upsample_is_identity_and_backward_adjoint(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 2, 3, 1))
    up, cache = upsample_nearest_forward(x)
    assert np.array_equal(maxpool3d_forward(up)[0], x)
    g = rng.standard_normal(up.shape)
    assert np.isclose(np.sum(up * g), np.sum(x * upsample_nearest_backward(g, cache)))


@given(st.integers(0, 2 ** 31))
def test_relu_and_pool_commute(seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, 4, 4, 2))
    a = relu_forward(maxpool3d_forward(x)[0])[0]
    b = maxpool3d_forward(relu_forward(x)[0])[0]
    assert np.array_equal(a, b)


# -- batchnorm ------------------------------------------------------------------

def test_batchnorm_training_moments(rng):
    x = rng.normal(4, 3, (4, 3, 3, 4, 5)).astype(np.float32)
    bn = BatchNormLayer.create(3, np.float32)
    out, _ = batchnorm3d_forward(x, bn, True)
    assert np.all(np.abs(out.mean(axis=(0, 2, 3, 4))) < 1e-6)
    xd = x.astype(np.float64)
    mu = xd.mean(axis=(0, 2, 3, 4), keepdims=True)
    var = xd.var(axis=(0, 2, 3, 4), keepdims=True)
    assert np.max(np.abs(out - (xd - mu) / np.sqrt(var + 1e-5))) < 1e-5
    n = x.size // 3
    assert np.allclose(bn.running_mean, 0.1 * mu.ravel(), rtol=1e-5)
    assert np.allclose(bn.running_var, 0.9 + 0.1 * var.ravel() * n / (n - 1), rtol=1e-5)


def test_batchnorm_affine_and_inference(rng):
    x = rng.standard_normal((8, 2, 4, 4, 4))
    x = (x - x.mean(axis=(0, 2, 3, 4), keepdims=True)) / x.std(axis=(0, 2, 3, 4), keepdims=True)
    bn = BatchNormLayer(np.full(2, 2.0), np.full(2, 3.0), np.zeros(2), np.ones(2), eps=1e-12)
    out, _ = batchnorm3d_forward(x, bn, True)
    assert np.allclose(out.mean(axis=(0, 2, 3, 4)), 3) and np.allclose(out.std(axis=(0, 2, 3, 4)), 2)
    bn2 = BatchNormLayer(np.ones(2), np.zeros(2), np.array([1.0, -1.0]), np.array([4.0, 9.0]), eps=1e-12)
    before = bn2.running_mean.copy()
    out, _ = batchnorm3d_forward(x, bn2, False)
    assert np.allclose(out[:, 0], (x[:, 0] - 1) / 2) and np.allclose(out[:, 1], (x[:, 1] + 1) / 3)
    assert np.array_equal(bn2.running_mean, before)


def test_batchnorm_single_value_errors():
    with pytest.raises(ValueError):
        batchnorm3d_forward(np.zeros((1, 2, 1, 1, 1)), BatchNormLayer.create(2, np.float64), True)


# -- relu -----------------------------------------------------------------------

def test_relu_examples():
    assert np.array_equal(relu_forward(np.array([-1.0, 0.0, 2.0]))[0], [0, 0, 2])
    assert not relu_forward(-np.ones(5))[0].any()


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
def test_relu_idempotent(v):
    x = np.array(v)
    assert np.array_equal(relu_forward(relu_forward(x)[0])[0], relu_forward(x)[0])


# -- backward plumbing ----------------------------------------------------------

def test_zero_upstream_gives_zero_gradients(rng):
    x = rng.standard_normal((2, 2, 4, 4, 4))
    layer = conv_layer(rng, 2, 3)
    out, cache = conv3d_forward(x, layer)
    dx, dw, db = conv3d_backward(np.zeros_like(out), cache)
    assert not dx.any() and not dw.any() and not db.any()
    bn = BatchNormLayer.create(3, np.float64)
    out, cache = batchnorm3d_forward(out, bn, True)
    dx, dg, dbeta = batchnorm3d_backward(np.zeros_like(out), cache)
    assert not dx.any() and not dg.any() and not dbeta.any()


@pytest.mark.parametrize("fn", [maxpool3d_backward, upsample_nearest_backward, relu_backward,
                                batchnorm3d_backward, conv3d_backward])
def test_missing_cache(fn):
    with pytest.raises((MissingCacheError, TypeError, ValueError)):
        fn(np.zeros((1, 1, 2, 2, 2)), None)


def test_conv_bn_relu_block_gradient(rng):
    x = rng.standard_normal((3, 2, 4, 4, 2))
    conv = conv_layer(rng, 2, 3)
    bn = BatchNormLayer(rng.uniform(0.5, 2, 3), rng.standard_normal(3), np.zeros(3), np.ones(3))
    target = rng.standard_normal((3, 3, 4, 4, 2))

    def forward():
        h, c1 = conv3d_forward(x, conv)
        h, c2 = batchnorm3d_forward(h, bn, True)
        h, c3 = relu_forward(h)
        return h, (c1, c2, c3)

    def loss():
        return float(np.sum((forward()[0] - target) ** 2))

    h, (c1, c2, c3) = forward()
    g = relu_backward(2 * (h - target), c3)
    g, dgamma, dbeta = batchnorm3d_backward(g, c2)
    dx, dw, db = conv3d_backward(g, c1)
    params = {"x": x, "w": conv.weight, "b": conv.bias, "gamma": bn.gamma, "beta": bn.beta}
    grads = {"x": dx, "w": dw, "b": db, "gamma": dgamma, "beta": dbeta}
    assert gradient_check(loss, params, grads, n_checks=25, rng=rng) < 1e-4


def test_gradient_check_linear_mse_and_fault_injection(rng):
    w = rng.standard_normal((3, 4))
    x = rng.standard_normal((5, 4))
    y = rng.standard_normal((5, 3))
    loss = lambda: float(np.mean((x @ w.T - y) ** 2))
    grad = 2 * (x @ w.T - y).T @ x / y.size
    assert gradient_check(loss, {"w": w}, {"w": grad}, n_checks=12, rng=rng) < 1e-7
    corrupted = grad * 1.1
    assert gradient_check(loss, {"w": w}, {"w": corrupted}, n_checks=12, rng=rng) > 1e-2


# -- adam -----------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(lr=0.1))
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step():
    p = {"w": np.array([0.3])}
    state = AdamState(lr=0.0005)
    adam_step(p, {"w": np.array([1.0])}, state)
    assert state.t == 1
    assert abs((0.3 - p["w"][0]) - 0.0005 / (1 + 1e-8)) < 1e-15


def test_adam_two_steps_match_scalar_recurrence():
    grads = [0.7, -1.3]
    p = {"w": np.array([2.0])}
    state = AdamState(lr=0.01)
    for g in grads:
        adam_step(p, {"w": np.array([g])}, state)
    # independent scalar evaluation of the bias-corrected update
    w, m, v = 2.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.01 * (m / (1 - 0.9 ** t)) / ((v / (1 - 0.999 ** t)) ** 0.5 + 1e-8)
    assert abs(p["w"][0] - w) < 1e-14


def test_adam_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(lr=0.1))
