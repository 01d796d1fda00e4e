"""Fast installation self-test: brute-force conv oracle, finite-difference
gradient checks for every layer and loss, t-test vs quadrature, UAR arithmetic."""
from __future__ import annotations

import math
from typing import Callable, List, NamedTuple

import numpy as np
from scipy import integrate

from .classify import uar_from_recalls
from .model import BsenConfig, CenterBank, build_model, contrastive_loss, contrastive_loss_grad
from .model import reconstruction_loss, reconstruction_loss_grad
from .nn import (BatchNormLayer, ConvLayer, batchnorm3d_backward, batchnorm3d_forward, conv3d_backward,
                 conv3d_forward, gradient_check, maxpool3d_backward, maxpool3d_forward, relu_backward,
                 relu_forward, upsample_nearest_backward, upsample_nearest_forward)
from .roi import two_sided_t_test


class Check(NamedTuple):
    name: str
    value: float
    limit: float

    @property
    def passed(self) -> bool:
        return bool(self.value < self.limit)


def conv3d_loops(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Direct nested-loop 3x3x3 convolution, stride 1, zero padding 1."""
    B, C, X, Y, Z = x.shape
    O = w.shape[0]
    xp = np.zeros((B, C, X + 2, Y + 2, Z + 2))
    xp[:, :, 1:-1, 1:-1, 1:-1] = x
    out = np.zeros((B, O, X, Y, Z))
    for n in range(B):
        for o in range(O):
            for i in range(X):
                for j in range(Y):
                    for k in range(Z):
                        out[n, o, i, j, k] = np.sum(xp[n, :, i:i + 3, j:j + 3, k:k + 3] * w[o]) + b[o]
    return out


def _layer_check(forward: Callable, backward: Callable, x: np.ndarray, params: dict,
                 rng: np.random.Generator, n_checks: int = 12) -> float:
    """Gradient check of ``sum(R * layer(x))`` for a random projection R."""
    out, _ = forward(x)
    r = rng.standard_normal(out.shape)
    loss = lambda: float(np.sum(r * forward(x)[0]))
    _, cache = forward(x)
    grads = backward(r, cache)
    return gradient_check(loss, {"x": x, **params}, {"x": grads[0], **grads[1]}, n_checks=n_checks, rng=rng)


def layer_gradient_checks(rng: np.random.Generator) -> List[Check]:
    out = []
    x = rng.standard_normal((2, 3, 4, 4, 6))
    conv = ConvLayer.create(3, 4, rng, np.float64)
    conv.bias[:] = rng.standard_normal(4)
    err = _layer_check(lambda v: conv3d_forward(v, conv),
                       lambda g, c: (lambda r: (r[0], {"w": r[1], "b": r[2]}))(conv3d_backward(g, c)),
                       x, {"w": conv.weight, "b": conv.bias}, rng)
    out.append(Check("grad conv3d", err, 1e-4))
    bn = BatchNormLayer.create(3, np.float64)
    bn.gamma[:] = rng.uniform(0.5, 1.5, 3)
    bn.beta[:] = rng.standard_normal(3)
    err = _layer_check(lambda v: batchnorm3d_forward(v, bn, True),
                       lambda g, c: (lambda r: (r[0], {"gamma": r[1], "beta": r[2]}))(batchnorm3d_backward(g, c)),
                       x, {"gamma": bn.gamma, "beta": bn.beta}, rng)
    out.append(Check("grad batchnorm3d", err, 1e-4))
    err = _layer_check(relu_forward, lambda g, c: (relu_backward(g, c), {}), x, {}, rng)
    out.append(Check("grad relu", err, 1e-4))
    err = _layer_check(maxpool3d_forward, lambda g, c: (maxpool3d_backward(g, c), {}), x, {}, rng)
    out.append(Check("grad maxpool3d", err, 1e-4))
    err = _layer_check(upsample_nearest_forward, lambda g, c: (upsample_nearest_backward(g, c), {}), x, {}, rng)
    out.append(Check("grad upsample", err, 1e-4))
    return out


def loss_gradient_checks(rng: np.random.Generator) -> List[Check]:
    recon = rng.standard_normal((3, 1, 2, 2, 2))
    orig = rng.standard_normal(recon.shape)
    g = reconstruction_loss_grad(recon, orig)
    err = gradient_check(lambda: reconstruction_loss(recon, orig), {"r": recon}, {"r": g}, n_checks=12, rng=rng)
    lat = rng.standard_normal((6, 5))
    e = np.array([0, 1, 0, 1, 1, 0])
    centers = CenterBank(rng.standard_normal((2, 5)))
    g = contrastive_loss_grad(lat, e, centers, 1.0)
    err2 = gradient_check(lambda: contrastive_loss(lat, e, centers, 1.0), {"x": lat}, {"x": g}, n_checks=12, rng=rng)
    return [Check("grad reconstruction loss", err, 1e-4), Check("grad contrastive loss", err2, 1e-4)]


def model_gradient_check(rng: np.random.Generator) -> Check:
    cfg = BsenConfig(input_dims=(8, 8, 8), channels=(4, 3, 2), dtype="float64", seed=int(rng.integers(1 << 30)))
    net = build_model(cfg)
    x = rng.standard_normal((3, 1, 8, 8, 8))
    e = np.array([0, 1, 1])
    centers = CenterBank(rng.standard_normal((2, cfg.latent_dim)))

    def loss():
        recon, lat, _ = net.forward(x)
        return reconstruction_loss(recon, x) + 0.5 * contrastive_loss(lat, e, centers, 1.0)

    recon, lat, cache = net.forward(x)
    grads = net.backward(cache, reconstruction_loss_grad(recon, x), 0.5 * contrastive_loss_grad(lat, e, centers, 1.0))
    err = gradient_check(loss, net.params(), grads, n_checks=30, rng=rng)
    return Check("grad full model (L_rec + alpha*L_C)", err, 1e-4)


def t_test_quadrature(rng: np.random.Generator) -> Check:
    a = rng.normal(0.0, 1.0, 9)
    b = rng.normal(0.8, 1.3, 12)
    t, p = two_sided_t_test(a, b)
    df = len(a) + len(b) - 2
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
    tail, _ = integrate.quad(lambda u: c * (1 + u * u / df) ** (-(df + 1) / 2), abs(t), np.inf,
                             epsabs=1e-14, epsrel=1e-13)
    return Check("t-test p vs quadrature", abs(p - 2 * tail), 1e-8)


def run_selfcheck(seed: int = 0) -> List[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    x = rng.standard_normal((1, 2, 5, 6, 7))
    conv = ConvLayer.create(2, 3, rng, np.float64)
    conv.bias[:] = rng.standard_normal(3)
    diff = np.max(np.abs(conv3d_forward(x, conv)[0] - conv3d_loops(x, conv.weight, conv.bias)))
    checks.append(Check("conv3d vs nested loops", diff, 1e-6))
    checks += layer_gradient_checks(rng)
    checks += loss_gradient_checks(rng)
    checks.append(model_gradient_check(rng))
    checks.append(t_test_quadrature(rng))
    checks.append(Check("UAR arithmetic", abs(uar_from_recalls([61.54, 73.91, 42.86]) - 59.44), 0.01))
    return checks
