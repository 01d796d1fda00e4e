"""Layer primitives: 3x3x3 convolution, 2x2x2 max pooling, nearest
upsampling, batch normalization and ReLU, each with an exact backward.

The public functions take ``(batch, channels, x, y, z)`` tensors. The
``*_cm`` variants work on channel-major ``(channels, batch, x, y, z)``
arrays, which keeps per-channel reductions contiguous and lets convolutions
run as plain matmuls; the network uses those directly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

# kernel taps in (dx, dy, dz) lexicographic order; index k = 9*dx + 3*dy + dz
_TAPS = [(a, b, c) for a in range(3) for b in range(3) for c in range(3)]


class MissingCacheError(RuntimeError):
    pass


def _check_cache(cache):
    if cache is None:
        raise MissingCacheError("backward called without a forward cache")


def _swap(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.swapaxes(0, 1))


@dataclass
class ConvLayer:
    """3x3x3 convolution, stride 1, zero padding 1."""

    weight: np.ndarray  # (out, in, 3, 3, 3)
    bias: np.ndarray  # (out,)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def create(cls, in_channels: int, out_channels: int, rng: np.random.Generator,
               dtype=np.float32) -> "ConvLayer":
        # uniform in +-sqrt(1/fan_in) for weights and bias alike
        bound = np.sqrt(1.0 / (in_channels * 27))
        w = rng.uniform(-bound, bound, size=(out_channels, in_channels, 3, 3, 3))
        b = rng.uniform(-bound, bound, size=out_channels)
        return cls(w.astype(dtype), b.astype(dtype))


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("batchnorm eps must be positive")

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormLayer":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype))


# --------------------------------------------------------------------------
# convolution
#
# Two equivalent evaluation orders; the cheaper one depends on the channel
# counts. "cols" gathers 27 shifted copies of the input (C*27 rows) and does a
# single matmul; "shift" multiplies the padded input by all 27 taps at once
# (27*O rows) and sums shifted windows of the result.


def _pad1(x: np.ndarray) -> np.ndarray:
    C, B, X, Y, Z = x.shape
    xp = np.zeros((C, B, X + 2, Y + 2, Z + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1, 1:-1] = x
    return xp


def _im2col(xp: np.ndarray, spatial) -> np.ndarray:
    """(C, B, X+2, Y+2, Z+2) -> (C*27, B*X*Y*Z)."""
    C, B = xp.shape[:2]
    X, Y, Z = spatial
    cols = np.empty((C, 27, B, X, Y, Z), dtype=xp.dtype)
    for k, (a, b, c) in enumerate(_TAPS):
        cols[:, k] = xp[:, :, a:a + X, b:b + Y, c:c + Z]
    return cols.reshape(C * 27, -1)


def _conv_raw(x: np.ndarray, w: np.ndarray):
    """Bias-free channel-major convolution. Returns (out, strategy, saved)."""
    C, B, X, Y, Z = x.shape
    O = w.shape[0]
    xp = _pad1(x)
    if C <= O:
        cols = _im2col(xp, (X, Y, Z))
        out = (w.reshape(O, C * 27) @ cols).reshape(O, B, X, Y, Z)
        return out, "cols", cols
    xpc = xp.reshape(C, -1)
    taps = w.transpose(2, 3, 4, 0, 1).reshape(27 * O, C)
    full = (taps @ xpc).reshape(27, O, B, X + 2, Y + 2, Z + 2)
    out = full[0, :, :, :X, :Y, :Z].copy()
    for k, (a, b, c) in enumerate(_TAPS[1:], start=1):
        out += full[k, :, :, a:a + X, b:b + Y, c:c + Z]
    return out, "shift", xpc


def conv3d_forward_cm(x: np.ndarray, layer: ConvLayer):
    if x.ndim != 5:
        raise ValueError(f"conv3d expects a 5D tensor, got shape {x.shape}")
    if x.shape[0] != layer.in_channels:
        raise ValueError(f"conv3d channel mismatch: input has {x.shape[0]}, layer expects {layer.in_channels}")
    out, strategy, saved = _conv_raw(x, layer.weight)
    out += layer.bias.reshape(-1, 1, 1, 1, 1)
    return out, (strategy, saved, x.shape, layer.weight)


def conv3d_backward_cm(dout: np.ndarray, cache, input_grad: bool = True):
    """Returns (dx, dweight, dbias); dx is None when ``input_grad`` is off."""
    _check_cache(cache)
    strategy, saved, xshape, w = cache
    C, B, X, Y, Z = xshape
    O = w.shape[0]
    g = np.ascontiguousarray(dout)
    db = g.reshape(O, -1).sum(axis=1)
    if strategy == "cols":
        dw = (g.reshape(O, -1) @ saved.T).reshape(w.shape)
    else:
        shifted = np.zeros((27, O, B, X + 2, Y + 2, Z + 2), dtype=g.dtype)
        for k, (a, b, c) in enumerate(_TAPS):
            shifted[k, :, :, a:a + X, b:b + Y, c:c + Z] = g
        dtaps = shifted.reshape(27 * O, -1) @ saved.T  # (27*O, C)
        dw = np.ascontiguousarray(dtaps.reshape(3, 3, 3, O, C).transpose(3, 4, 0, 1, 2))
    dx = None
    if input_grad:
        # input gradient is a convolution with the flipped, channel-swapped kernel
        w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        dx, _, _ = _conv_raw(g, w_flip)
    return dx, dw, db


def conv3d_forward(x: np.ndarray, layer: ConvLayer):
    if x.ndim != 5:
        raise ValueError(f"conv3d expects a 5D tensor, got shape {x.shape}")
    if x.shape[1] != layer.in_channels:
        raise ValueError(f"conv3d channel mismatch: input has {x.shape[1]}, layer expects {layer.in_channels}")
    out, cache = conv3d_forward_cm(_swap(x), layer)
    return _swap(out), cache


def conv3d_backward(dout: np.ndarray, cache):
    """Returns (dx, dweight, dbias)."""
    dx, dw, db = conv3d_backward_cm(_swap(dout), cache)
    return _swap(dx), dw, db


# --------------------------------------------------------------------------
# pooling / upsampling (layout-agnostic: they only touch the spatial axes)


@njit(cache=True)
def _pool_kernel(x, out, idx):
    P, Q, X, Y, Z = out.shape
    for p in range(P):
        for q in range(Q):
            for i in range(X):
                for j in range(Y):
                    for k in range(Z):
                        best = x[p, q, 2 * i, 2 * j, 2 * k]
                        arg = 0
                        for t in range(1, 8):
                            v = x[p, q, 2 * i + (t >> 2), 2 * j + ((t >> 1) & 1), 2 * k + (t & 1)]
                            if v > best:  # strict: earlier element wins ties
                                best = v
                                arg = t
                        out[p, q, i, j, k] = best
                        idx[p, q, i, j, k] = arg


@njit(cache=True)
def _unpool_kernel(dout, idx, dx):
    P, Q, X, Y, Z = dout.shape
    for p in range(P):
        for q in range(Q):
            for i in range(X):
                for j in range(Y):
                    for k in range(Z):
                        t = idx[p, q, i, j, k]
                        dx[p, q, 2 * i + (t >> 2), 2 * j + ((t >> 1) & 1), 2 * k + (t & 1)] = dout[p, q, i, j, k]


def maxpool3d_forward(x: np.ndarray):
    """2x2x2 max pooling. Ties go to the first element of the block in
    (x, y, z) lexicographic order (lowest C-order index)."""
    P, Q, X, Y, Z = x.shape
    if X % 2 or Y % 2 or Z % 2:
        raise ValueError(f"maxpool3d needs even spatial dims, got {(X, Y, Z)}")
    out = np.empty((P, Q, X // 2, Y // 2, Z // 2), dtype=x.dtype)
    idx = np.empty(out.shape, dtype=np.int8)
    _pool_kernel(np.ascontiguousarray(x), out, idx)
    return out, (idx, x.shape)


def maxpool3d_backward(dout: np.ndarray, cache):
    _check_cache(cache)
    idx, xshape = cache
    dx = np.zeros(xshape, dtype=dout.dtype)
    _unpool_kernel(np.ascontiguousarray(dout), idx, dx)
    return dx


def upsample_nearest_forward(x: np.ndarray, factor: int = 2):
    P, Q, X, Y, Z = x.shape
    f = factor
    out = np.broadcast_to(x[:, :, :, None, :, None, :, None], (P, Q, X, f, Y, f, Z, f))
    return out.reshape(P, Q, X * f, Y * f, Z * f), (x.shape, f)


def upsample_nearest_backward(dout: np.ndarray, cache):
    _check_cache(cache)
    _, f = cache
    g = dout
    for axis in (2, 3, 4):
        index = [slice(None)] * 5
        parts = []
        for i in range(f):
            index[axis] = slice(i, None, f)
            parts.append(g[tuple(index)])
        g = parts[0] + parts[1] if f == 2 else np.sum(parts, axis=0)
    return g


# --------------------------------------------------------------------------
# batch norm


def _col(v: np.ndarray) -> np.ndarray:
    return v.reshape(-1, 1)


def batchnorm3d_forward_cm(x: np.ndarray, layer: BatchNormLayer, training: bool):
    C = x.shape[0]
    flat = x.reshape(C, -1)
    n = flat.shape[1]
    if training:
        if n < 2:
            raise ValueError("batchnorm in training mode needs at least 2 values per channel")
        mean = flat.mean(axis=1)
        centered = flat - _col(mean)
        var = np.einsum("ij,ij->i", centered, centered) / n
        m = layer.momentum
        layer.running_mean[...] = (1 - m) * layer.running_mean + m * mean
        layer.running_var[...] = (1 - m) * layer.running_var + m * var * (n / (n - 1))
    else:
        mean, var = layer.running_mean, layer.running_var
        centered = flat - _col(mean)
    inv_std = (1.0 / np.sqrt(var + layer.eps)).astype(x.dtype)
    xhat = centered
    xhat *= _col(inv_std)
    out = xhat * _col(layer.gamma)
    out += _col(layer.beta)
    return out.reshape(x.shape), (xhat, inv_std, layer.gamma, training)


def batchnorm3d_backward_cm(dout: np.ndarray, cache):
    """Returns (dx, dgamma, dbeta)."""
    _check_cache(cache)
    xhat, inv_std, gamma, training = cache
    C = dout.shape[0]
    g = dout.reshape(C, -1)
    dbeta = g.sum(axis=1)
    dgamma = np.einsum("ij,ij->i", g, xhat)
    scale = _col(gamma * inv_std)
    if not training:
        return (g * scale).reshape(dout.shape), dgamma, dbeta
    n = g.shape[1]
    dx = g - _col(dbeta / n)
    dx -= xhat * _col(dgamma / n)
    dx *= scale
    return dx.reshape(dout.shape), dgamma, dbeta


def batchnorm3d_forward(x: np.ndarray, layer: BatchNormLayer, training: bool):
    out, cache = batchnorm3d_forward_cm(_swap(x), layer, training)
    return _swap(out), cache


def batchnorm3d_backward(dout: np.ndarray, cache):
    dx, dgamma, dbeta = batchnorm3d_backward_cm(_swap(dout), cache)
    return _swap(dx), dgamma, dbeta


# --------------------------------------------------------------------------
# relu (elementwise, layout-agnostic)


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), x > 0


def relu_backward(dout: np.ndarray, cache):
    _check_cache(cache)
    return dout * cache
