"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation that touches a tensor with ``requires_grad=True`` records a
node holding its parents and a closure mapping the output gradient to parent
gradients. Node ids come from a global counter, so sorting the reachable nodes
by id gives a valid topological order; ``backward`` walks that order in
reverse and visits each node once.

Broadcasting is deliberately limited to three forms: identical shapes, a
1-D bias matching the last axis, and Python scalars.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from fslab import _kernels

_ids = itertools.count()
_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """NaN or otherwise non-finite input where finite values are required."""


class DegenerateVectorError(ValueError):
    """A vector is too close to zero to be normalized."""


class DoubleBackwardError(RuntimeError):
    """Backward was requested on a consumed graph or with unreset gradients."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_id", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._id = next(_ids)
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    @property
    def is_leaf(self):
        return self._op == "leaf"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{rg})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("division is only defined by a Python scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self, accumulate=False):
        backward(self, accumulate=accumulate)


def _raise_not_scalar(shape):
    raise DimensionError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _result(data, parents, backward_fn, op):
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


@dataclass
class GradReport:
    """Outcome of :func:`finite_diff_check`."""

    passed: bool
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    tol: float
    failures: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def _bias_like(a_shape, b_shape):
    return len(b_shape) == 1 and len(a_shape) >= 1 and a_shape[-1] == b_shape[0] and a_shape != b_shape


def _sum_to_bias(g):
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a, b):
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,), "add_scalar")
    a = as_tensor(a)
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if _bias_like(a.shape, b.shape):
        return _result(a.data + b.data, (a, b), lambda g: (g, _sum_to_bias(g)), "add_bias")
    if _bias_like(b.shape, a.shape):
        return add(b, a)
    raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    return add(a, neg(b))


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    if a.shape == b.shape:
        ad, bd = a.data, b.data
        return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")
    if _bias_like(a.shape, b.shape):
        ad, bd = a.data, b.data
        return _result(ad * bd, (a, b), lambda g: (g * bd, _sum_to_bias(g * ad)), "mul_bias")
    if _bias_like(b.shape, a.shape):
        return mul(b, a)
    raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a):
    keep = a.data > 0
    return _result(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,), "relu")


def gelu(a):
    """GELU with the tanh approximation."""
    x2 = np.ascontiguousarray(a.data)
    out, t = _kernels.gelu_forward(x2)
    return _result(out, (a,), lambda g: (_kernels.gelu_backward(x2, t, g),), "gelu")


def tsum(a, axis=None, keepdims=False):
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    shape = a.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis for p in parts)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(a.data[idx]), (a,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def dropout(a, p, rng, training=True):
    """Inverted dropout; identity when ``p == 0`` or not training."""
    if not training or p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(np.float64) / (1.0 - p)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product.

    Supports ``(m, k) @ (k, n)``, stacked operands with identical leading
    dimensions, and an N-D left operand against a 2-D right operand.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        out = ad @ bd

        def bw(g):
            # frozen operands get no gradient; skipping them halves backward cost
            ga = g @ bd.T if a.requires_grad else None
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if b.requires_grad else None
            return ga, gb

        return _result(out, (a, b), bw, "matmul")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    out = ad @ bd

    def bw_batched(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw_batched, "bmm")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` stored as ``(in, out)``."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# normalization and probability
# ---------------------------------------------------------------------------


def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what}: non-finite input")


def softmax(a, axis=-1):
    """Softmax along ``axis`` (max-subtracted)."""
    if axis not in (-1, a.ndim - 1):
        perm = list(range(a.ndim))
        perm[axis], perm[-1] = perm[-1], perm[axis]
        return transpose(softmax(transpose(a, perm)), perm)
    _check_finite(a.data, "softmax")
    shape = a.shape
    y = _kernels.softmax_forward(_rows(a.data)).reshape(shape)

    def bw(g):
        return (_kernels.softmax_backward(_rows(y), _rows(g)).reshape(shape),)

    return _result(y, (a,), bw, "softmax")


def log_softmax(a, mask=None):
    """Log-softmax over the last axis.

    ``mask`` (bool, same shape) restricts each row's normalization to the
    marked entries; unmarked outputs are 0 and receive no gradient.
    """
    _check_finite(a.data, "log_softmax")
    shape = a.shape
    m = None if mask is None else _rows(np.asarray(mask, dtype=np.uint8))
    if m is not None and not m.any(axis=1).all():
        raise DimensionError("log_softmax mask leaves a row empty")
    y = _kernels.log_softmax_forward(_rows(a.data), m).reshape(shape)

    def bw(g):
        return (_kernels.log_softmax_backward(_rows(y), _rows(g), m).reshape(shape),)

    return _result(y, (a,), bw, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean and unit variance, then affine."""
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(f"layer_norm gain/bias {gain.shape}/{bias.shape} vs width {width}")
    shape = x.shape
    y, xhat, inv = _kernels.layer_norm_forward(_rows(x.data), gain.data, bias.data, eps)

    def bw(g):
        dx, dg, db = _kernels.layer_norm_backward(_rows(g), xhat, inv, gain.data)
        return dx.reshape(shape), dg, db

    return _result(y.reshape(shape), (x, gain, bias), bw, "layer_norm")


def l2_normalize(a, min_norm=1e-12):
    """Scale each vector along the last axis to unit Euclidean norm."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(norm < min_norm):
        raise DegenerateVectorError(f"cannot normalize vector with norm < {min_norm:g}")
    y = a.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _result(y, (a,), bw, "l2_normalize")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _reachable(root):
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen or not node.requires_grad:
            continue
        seen[node._id] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda n: n._id, reverse=True)


def backward(loss, accumulate=False):
    """Propagate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The graph is consumed. Leaves that already hold a gradient raise
    :class:`DoubleBackwardError` unless ``accumulate`` is set, so stale
    gradients must be cleared with :func:`zero_grads` first.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise DoubleBackwardError("backward already ran on this graph")
    if not loss.requires_grad:
        raise DoubleBackwardError("loss does not depend on any tensor requiring grad")
    order = _reachable(loss)
    if not accumulate:
        stale = [n for n in order if n.is_leaf and n.grad is not None]
        if stale:
            raise DoubleBackwardError(
                f"{len(stale)} leaf gradient(s) not reset; call zero_grads before backward"
            )
    for n in order:
        if not n.is_leaf and n._backward is None:
            raise DoubleBackwardError("graph contains nodes already consumed by a previous backward")
    grads = {loss._id: np.ones(loss.shape)}
    for node in order:
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pid = parent._id
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
        node._backward = None
        node._parents = ()
    loss._consumed = True


def zero_grads(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def finite_diff_check(f, x, step=1e-5, tol=1e-4, floor=1e-6):
    """Compare autodiff gradients of scalar ``f(x)`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    Failures are reported, never raised.
    """
    if not 0 < step <= 1e-2:
        raise ValueError("step must lie in (0, 1e-2]")
    x = as_tensor(x)
    base = np.array(x.data, copy=True)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.requires_grad:
        backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            probe = base.copy().reshape(-1)
            probe[i] += step
            fp = f(Tensor(probe.reshape(base.shape))).item()
            probe[i] -= 2 * step
            fm = f(Tensor(probe.reshape(base.shape))).item()
            flat[i] = (fp - fm) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    failures = [int(i) for i in np.flatnonzero(rel.reshape(-1) > tol)]
    return GradReport(max_rel <= tol, max_rel, analytic, numeric, tol, failures)


def global_norm(arrays):
    return math.sqrt(sum(float((a * a).sum()) for a in arrays))
