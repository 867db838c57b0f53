# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled single-pass versions of the row kernels in ``_numpy``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, tanh, INFINITY

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_K = 0.044715


def _rows(x):
    return np.ascontiguousarray(x, dtype=np.float64)


cdef inline double _tanh(double u) nogil:
    # exp-based tanh is markedly faster than libm tanh; clamp avoids overflow
    if u > 20.0:
        return 1.0
    if u < -20.0:
        return -1.0
    return 1.0 - 2.0 / (exp(2.0 * u) + 1.0)


def gelu_forward(x):
    """Returns ``(y, t)`` where ``t`` is the inner tanh, reused by backward."""
    x = _rows(x)
    cdef double[::1] xv = x.reshape(-1)
    out = np.empty_like(x)
    tanh_out = np.empty_like(x)
    cdef double[::1] ov = out.reshape(-1)
    cdef double[::1] tv = tanh_out.reshape(-1)
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef double v, t
    for i in range(n):
        v = xv[i]
        t = _tanh(GELU_C * (v + GELU_K * v * v * v))
        tv[i] = t
        ov[i] = 0.5 * v * (1.0 + t)
    return out, tanh_out


def gelu_backward(x, t, g):
    x = _rows(x)
    t = _rows(t)
    g = _rows(g)
    cdef double[::1] xv = x.reshape(-1)
    cdef double[::1] tv = t.reshape(-1)
    cdef double[::1] gv = g.reshape(-1)
    out = np.empty_like(x)
    cdef double[::1] ov = out.reshape(-1)
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef double v, th
    for i in range(n):
        v = xv[i]
        th = tv[i]
        ov[i] = gv[i] * (0.5 * (1.0 + th)
                         + 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * v * v))
    return out


def softmax_forward(x, mask=None):
    x = _rows(x)
    cdef double[:, ::1] xv = x
    out = np.empty_like(x)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t r, c, rows = xv.shape[0], cols = xv.shape[1]
    cdef double m, s
    cdef const unsigned char[:, ::1] mv
    if mask is None:
        for r in range(rows):
            m = -INFINITY
            for c in range(cols):
                if xv[r, c] > m:
                    m = xv[r, c]
            s = 0.0
            for c in range(cols):
                ov[r, c] = exp(xv[r, c] - m)
                s += ov[r, c]
            for c in range(cols):
                ov[r, c] /= s
        return out
    mv = np.ascontiguousarray(mask, dtype=np.uint8)
    for r in range(rows):
        m = -INFINITY
        for c in range(cols):
            if mv[r, c] and xv[r, c] > m:
                m = xv[r, c]
        s = 0.0
        for c in range(cols):
            if mv[r, c]:
                ov[r, c] = exp(xv[r, c] - m)
                s += ov[r, c]
            else:
                ov[r, c] = 0.0
        for c in range(cols):
            ov[r, c] /= s
    return out


def softmax_backward(y, g):
    y = _rows(y)
    g = _rows(g)
    cdef double[:, ::1] yv = y
    cdef double[:, ::1] gv = g
    out = np.empty_like(y)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t r, c, rows = yv.shape[0], cols = yv.shape[1]
    cdef double d
    for r in range(rows):
        d = 0.0
        for c in range(cols):
            d += gv[r, c] * yv[r, c]
        for c in range(cols):
            ov[r, c] = yv[r, c] * (gv[r, c] - d)
    return out


def log_softmax_forward(x, mask=None):
    x = _rows(x)
    cdef double[:, ::1] xv = x
    out = np.empty_like(x)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t r, c, rows = xv.shape[0], cols = xv.shape[1]
    cdef double m, s, lse
    cdef const unsigned char[:, ::1] mv
    cdef bint masked = mask is not None
    if masked:
        mv = np.ascontiguousarray(mask, dtype=np.uint8)
    for r in range(rows):
        m = -INFINITY
        for c in range(cols):
            if (not masked or mv[r, c]) and xv[r, c] > m:
                m = xv[r, c]
        s = 0.0
        for c in range(cols):
            if not masked or mv[r, c]:
                s += exp(xv[r, c] - m)
        lse = log(s)
        for c in range(cols):
            if not masked or mv[r, c]:
                ov[r, c] = xv[r, c] - m - lse
            else:
                ov[r, c] = 0.0
    return out


def log_softmax_backward(out, g, mask=None):
    out = _rows(out)
    g = _rows(g)
    cdef double[:, ::1] yv = out
    cdef double[:, ::1] gv = g
    res = np.empty_like(out)
    cdef double[:, ::1] rv = res
    cdef Py_ssize_t r, c, rows = yv.shape[0], cols = yv.shape[1]
    cdef double s
    cdef const unsigned char[:, ::1] mv
    cdef bint masked = mask is not None
    if masked:
        mv = np.ascontiguousarray(mask, dtype=np.uint8)
    for r in range(rows):
        s = 0.0
        for c in range(cols):
            if not masked or mv[r, c]:
                s += gv[r, c]
        for c in range(cols):
            if not masked or mv[r, c]:
                rv[r, c] = gv[r, c] - exp(yv[r, c]) * s
            else:
                rv[r, c] = 0.0
    return res


def layer_norm_forward(x, gain, bias, double eps):
    x = _rows(x)
    cdef double[:, ::1] xv = x
    cdef double[::1] gv = _rows(gain)
    cdef double[::1] bv = _rows(bias)
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty(x.shape[0], dtype=np.float64)
    cdef double[:, ::1] yv = y
    cdef double[:, ::1] hv = xhat
    cdef double[::1] iv = inv
    cdef Py_ssize_t r, c, rows = xv.shape[0], cols = xv.shape[1]
    cdef double mu, var, d, istd
    for r in range(rows):
        mu = 0.0
        for c in range(cols):
            mu += xv[r, c]
        mu /= cols
        var = 0.0
        for c in range(cols):
            d = xv[r, c] - mu
            var += d * d
        var /= cols
        istd = 1.0 / sqrt(var + eps)
        iv[r] = istd
        for c in range(cols):
            d = (xv[r, c] - mu) * istd
            hv[r, c] = d
            yv[r, c] = d * gv[c] + bv[c]
    return y, xhat, inv


def layer_norm_backward(g, xhat, inv_std, gain):
    g = _rows(g)
    xhat = _rows(xhat)
    cdef double[:, ::1] gv = g
    cdef double[:, ::1] hv = xhat
    cdef double[::1] iv = _rows(inv_std)
    cdef double[::1] wv = _rows(gain)
    cdef Py_ssize_t r, c, rows = gv.shape[0], cols = gv.shape[1]
    dx = np.empty_like(g)
    dgain = np.zeros(cols, dtype=np.float64)
    dbias = np.zeros(cols, dtype=np.float64)
    cdef double[:, ::1] dv = dx
    cdef double[::1] dgv = dgain
    cdef double[::1] dbv = dbias
    cdef double s1, s2, dh, scale
    for r in range(rows):
        s1 = 0.0
        s2 = 0.0
        for c in range(cols):
            dh = gv[r, c] * wv[c]
            s1 += dh
            s2 += dh * hv[r, c]
            dgv[c] += gv[r, c] * hv[r, c]
            dbv[c] += gv[r, c]
        scale = iv[r] / cols
        for c in range(cols):
            dv[r, c] = scale * (cols * gv[r, c] * wv[c] - s1 - hv[r, c] * s2)
    return dx, dgain, dbias
