"""Forward/backward pairs for the handful of layers the model needs.

All tensors are NHWC.  Each ``*_fwd`` returns ``(out, cache)``; the matching
``*_bwd`` takes the upstream gradient and that cache.
"""

import numpy as np


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def conv_out_size(n, k=3, stride=1, pad=1):
    return (n + 2 * pad - k) // stride + 1


def conv2d_fwd(x, w, b, stride=1, pad=1):
    """Cross-correlation with a ``(k, k, Cin, Cout)`` kernel, zero padding."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects NHWC input, got shape {x.shape}")
    k, k2, cin, cout = w.shape
    if k != k2 or x.shape[3] != cin:
        raise ValueError(f"kernel {w.shape} does not fit input {x.shape}")
    n, h, wd, _ = x.shape
    ho = conv_out_size(h, k, stride, pad)
    wo = conv_out_size(wd, k, stride, pad)
    xp = _pad(x, pad)
    cols = np.empty((n, ho, wo, k, k, cin), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, di, dj, :] = xp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :]
    cols = cols.reshape(n * ho * wo, k * k * cin)
    out = cols @ w.reshape(k * k * cin, cout) + b
    return out.reshape(n, ho, wo, cout), (cols, x.shape, w, stride, pad)


def conv2d_bwd(dout, cache):
    cols, xshape, w, stride, pad = cache
    k, _, cin, cout = w.shape
    n, h, wd, _ = xshape
    _, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(-1, cout).T).reshape(n, ho, wo, k, k, cin)
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin), dtype=dout.dtype)
    for di in range(k):
        for dj in range(k):
            dxp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += dcols[:, :, :, di, dj, :]
    dx = dxp[:, pad:pad + h, pad:pad + wd, :] if pad else dxp
    return dx, dw, db


def batchnorm_fwd(x, gamma, beta, running_mean, running_var, train=True,
                  momentum=0.9, eps=1e-5, update_stats=True):
    """Per-channel batch norm over every axis but the last.

    In training mode the batch statistics are used and, if ``update_stats``,
    blended into the running buffers in place.
    """
    axes = tuple(range(x.ndim - 1))
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_stats:
            running_mean *= momentum
            running_mean += (1 - momentum) * mean
            running_var *= momentum
            running_var += (1 - momentum) * var
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma, train)


def batchnorm_bwd(dout, cache):
    xhat, inv_std, gamma, train = cache
    axes = tuple(range(dout.ndim - 1))
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    m = dout.size // dout.shape[-1]
    dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def fc_fwd(x, w, b):
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"fc weight {w.shape} does not fit input {x.shape}")
    return x @ w + b, (x, w)


def fc_bwd(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def relu_fwd(x):
    return np.maximum(x, 0), x > 0


def relu_bwd(dout, cache):
    return dout * cache
