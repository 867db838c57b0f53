"""Reference numpy implementations of the fused kernels."""

import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_K = 0.044715


def gelu_forward(x):
    """Returns ``(y, t)`` where ``t`` is the inner tanh, reused by backward."""
    t = np.tanh(_GELU_C * (x + _GELU_K * x * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_backward(x, t, g):
    dt = _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt)


def softmax_forward(x, mask=None):
    """Row softmax. ``mask`` (uint8, same shape) marks entries that take part."""
    if mask is None:
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    valid = mask.astype(bool)
    z = np.where(valid, x, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(valid, np.exp(z), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def log_softmax_forward(x, mask=None):
    """Row log-softmax; masked-out entries are returned as 0."""
    if mask is None:
        z = x - x.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    valid = mask.astype(bool)
    z = np.where(valid, x, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.where(valid, np.exp(z), 0.0).sum(axis=1, keepdims=True))
    return np.where(valid, z - lse, 0.0)


def log_softmax_backward(out, g, mask=None):
    if mask is None:
        return g - np.exp(out) * g.sum(axis=1, keepdims=True)
    valid = mask.astype(bool)
    gv = np.where(valid, g, 0.0)
    p = np.where(valid, np.exp(out), 0.0)
    return gv - p * gv.sum(axis=1, keepdims=True)


def layer_norm_forward(x, gain, bias, eps):
    """Returns ``(y, xhat, inv_std)`` with ``inv_std`` shaped ``(rows,)``."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv[:, 0]


def layer_norm_backward(g, xhat, inv_std, gain):
    """Returns ``(dx, dgain, dbias)``."""
    n = xhat.shape[1]
    dxhat = g * gain
    s1 = dxhat.sum(axis=1, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=1, keepdims=True)
    dx = (inv_std[:, None] / n) * (n * dxhat - s1 - xhat * s2)
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)
