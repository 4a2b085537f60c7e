"""Fused differentiable primitives used by the network layers."""

import numpy as np

from ..errors import InvalidBatchError, ShapeError
from .tensor import Tensor, _wrap


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` for ``x`` of shape (N, in), weight (out, in)."""
    x = _wrap(x)
    xd, w = x.data, weight.data
    if xd.ndim != 2 or xd.shape[1] != w.shape[1]:
        raise ShapeError(f"linear expects input (N, {w.shape[1]}), got {xd.shape}")
    out = xd @ w.T
    parents = (x, weight)
    if bias is not None:
        out = out + bias.data
        parents = parents + (bias,)

    def bw(g):
        gx = g @ w if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return Tensor._make(out, parents, bw)


def relu(x):
    return _wrap(x).relu()


def leaky_relu(x, slope=0.2):
    return _wrap(x).leaky_relu(slope)


def tanh(x):
    return _wrap(x).tanh()


def softplus(x):
    return _wrap(x).softplus()


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Feature-wise batch normalization over axis 0 of an (N, C) input.

    In training mode batch statistics are used and the running buffers are
    updated in place: ``running = (1 - momentum) * running + momentum * batch``
    (the running variance uses the unbiased estimate).  Eval mode normalizes
    with the running buffers.
    """
    x = _wrap(x)
    xd = x.data
    if training:
        n = xd.shape[0]
        if n < 2:
            raise InvalidBatchError("batch_norm in training mode needs at least 2 samples")
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu) * inv
        g_, b_ = gamma.data, beta.data

        def bw(g):
            gxhat = g * g_
            gx = inv * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
            return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

        return Tensor._make(xhat * g_ + b_, (x, gamma, beta), bw)

    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (xd - running_mean) * inv
    g_ = gamma.data

    def bw_eval(g):
        return g * g_ * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

    return Tensor._make(xhat * g_ + beta.data, (x, gamma, beta), bw_eval)


def dropout(x, rate, training, rng):
    """Inverted dropout: kept units are scaled by 1/(1-rate); eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = _wrap(x)
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask


def _skew(v):
    z = np.zeros(v.shape[:-1])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([np.stack([z, -w, y], -1),
                     np.stack([w, z, -x], -1),
                     np.stack([-y, x, z], -1)], -2)


_SMALL = 1e-4


def _rodrigues_coeffs(s):
    """A(s)=sin t/t, B(s)=(1-cos t)/t^2 with t=sqrt(s), plus dA/ds, dB/ds."""
    t = np.sqrt(s)
    small = s < _SMALL
    ts = np.where(small, 1.0, t)
    sin, cos = np.sin(ts), np.cos(ts)
    a = np.where(small, 1 - s / 6 + s * s / 120, sin / ts)
    b = np.where(small, 0.5 - s / 24 + s * s / 720, (1 - cos) / ts ** 2)
    da = np.where(small, -1 / 6 + s / 60, (ts * cos - sin) / (2 * ts ** 3))
    db = np.where(small, -1 / 24 + s / 360, (ts * sin - 2 * (1 - cos)) / (2 * ts ** 4))
    return a, b, da, db


def rodrigues(r):
    """Exponential map from axis-angle vectors (..., 3) to rotations (..., 3, 3).

    Uses ``R = I + A K + B K^2`` with ``K = skew(r)``; ``A`` and ``B`` switch to
    Taylor series near the identity so the map and its gradient stay finite
    at ``r = 0``.
    """
    r = _wrap(r)
    v = r.data
    s = (v * v).sum(axis=-1)
    a, b, da, db = _rodrigues_coeffs(s)
    k = _skew(v)
    k2 = k @ k
    out = np.eye(3) + a[..., None, None] * k + b[..., None, None] * k2

    def bw(g):
        grad = np.empty_like(v)
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            ei = _skew(e)
            dk2 = ei @ k + k @ ei
            dr = (2 * v[..., i] * da)[..., None, None] * k + a[..., None, None] * ei \
                + (2 * v[..., i] * db)[..., None, None] * k2 + b[..., None, None] * dk2
            grad[..., i] = (g * dr).sum(axis=(-1, -2))
        return (grad,)

    return Tensor._make(out, (r,), bw)
