import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import fslab._kernels as K
from fslab import tensor as T
from fslab._kernels import _numpy
from fslab.tensor import Tensor, finite_diff_check

from conftest import leaf

KERNEL_NAMES = [n for n in K.__all__ if n != "BACKEND"]


def _backends():
    out = [("numpy", _numpy)]
    try:
        from fslab._kernels import _fused

        out.append(("cython", _fused))
    except ImportError:
        pass
    return out


@pytest.fixture(params=_backends(), ids=lambda b: b[0])
def backend(request, monkeypatch):
    _, mod = request.param
    for name in KERNEL_NAMES:
        monkeypatch.setattr(K, name, getattr(mod, name))
    return request.param[0]


# ---------------------------------------------------------------------------
# worked examples
# ---------------------------------------------------------------------------


def test_matmul_identity_and_dot():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, b.data)
    np.testing.assert_array_equal(T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_grad_of_sum_is_ones():
    b = Tensor(np.eye(2))
    rep = finite_diff_check(lambda a: T.matmul(a, b).sum(), np.ones((2, 2)))
    assert rep.passed
    np.testing.assert_allclose(rep.analytic, np.ones((2, 2)))


def test_matmul_mismatch_names_shapes():
    with pytest.raises(T.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_examples(backend):
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(T.softmax(Tensor([math.log(3.0), 0.0])).data, [0.75, 0.25], atol=1e-15)
    big = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [1.0, 0.0], atol=1e-300)


def test_softmax_nan_raises():
    with pytest.raises(T.NumericError):
        T.softmax(Tensor([np.nan, 0.0]))


def test_layer_norm_examples(backend):
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_array_equal(T.layer_norm(Tensor([[5.0, 5.0]]), g, b).data, [[0.0, 0.0]])
    np.testing.assert_allclose(T.layer_norm(Tensor([[1.0, 3.0]]), g, b).data, [[-1.0, 1.0]], atol=1e-5)


def test_layer_norm_shape_check():
    with pytest.raises(T.DimensionError):
        T.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_l2_normalize_examples():
    np.testing.assert_array_equal(T.l2_normalize(Tensor([1.0, 0.0, 0.0])).data, [1.0, 0.0, 0.0])
    np.testing.assert_allclose(T.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])
    with pytest.raises(T.DegenerateVectorError):
        T.l2_normalize(Tensor([0.0, 0.0]))


def test_backward_examples():
    x = leaf([1.0, 2.0, 3.0])
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])
    y = leaf([3.0])
    (y * y).sum().backward()
    np.testing.assert_array_equal(y.grad, [6.0])


def test_frozen_leaf_gets_no_grad():
    w = Tensor([2.0, 3.0])
    x = leaf([1.0, 1.0])
    (w * x).sum().backward()
    assert w.grad is None
    np.testing.assert_array_equal(x.grad, [2.0, 3.0])


def test_double_backward_on_consumed_graph():
    x = leaf([1.0, 2.0])
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(T.DoubleBackwardError):
        loss.backward()


def test_double_backward_without_reset():
    x = leaf([1.0, 2.0])
    (x * 2.0).sum().backward()
    with pytest.raises(T.DoubleBackwardError):
        (x * 3.0).sum().backward()
    (x * 3.0).sum().backward(accumulate=True)
    np.testing.assert_array_equal(x.grad, [5.0, 5.0])
    T.zero_grads([x])
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_finite_diff_sum_of_squares_and_constant():
    x = np.random.default_rng(0).normal(size=(3, 4))
    rep = finite_diff_check(lambda t: (t * t).sum(), x)
    assert rep.passed
    np.testing.assert_allclose(rep.analytic, 2 * x)
    rep = finite_diff_check(lambda t: Tensor(np.array(7.0)), x)
    assert rep.passed and np.all(rep.analytic == 0) and np.all(rep.numeric == 0)


def test_finite_diff_reports_failures_instead_of_raising():
    def wrong(t):
        # forward is x^2 but backward claims gradient 1
        return T._result((t.data ** 2).sum(), (t,), lambda g: (g * np.ones(t.shape),), "bad")

    rep = finite_diff_check(wrong, np.array([3.0, -2.0]))
    assert not rep.passed and rep.failures == [0, 1]


def test_finite_diff_step_range():
    with pytest.raises(ValueError):
        finite_diff_check(lambda t: t.sum(), np.zeros(2), step=0.1)


def test_softmax_ce_composite_passes_at_1e3():
    logits = np.random.default_rng(3).normal(size=(4, 5))
    onehot = np.eye(5)[[0, 2, 4, 1]]
    rep = finite_diff_check(lambda t: (T.log_softmax(t) * Tensor(onehot)).sum() * -1.0, logits, tol=1e-3)
    assert rep.passed


# ---------------------------------------------------------------------------
# per-op gradient checks on random inputs, both kernel backends
# ---------------------------------------------------------------------------

OPS = {
    "add": lambda x, c: (x + c["b"]).sum(),
    "add_bias": lambda x, c: ((x + c["bias"]) * c["w"]).sum(),
    "sub": lambda x, c: ((x - c["b"]) * c["w"]).sum(),
    "mul": lambda x, c: (x * c["b"]).sum(),
    "mul_bias": lambda x, c: ((x * c["bias"]) * c["w"]).sum(),
    "div_scalar": lambda x, c: ((x / 3.0) * c["w"]).sum(),
    "exp": lambda x, c: (T.exp(x) * c["w"]).sum(),
    "log": lambda x, c: (T.log(T.exp(x) + 1.0) * c["w"]).sum(),
    "relu": lambda x, c: (T.relu(x) * c["w"]).sum(),
    "gelu": lambda x, c: (T.gelu(x) * c["w"]).sum(),
    "mean": lambda x, c: (T.mean(x * c["w"], axis=0) * c["bias"]).sum(),
    "sum_axis": lambda x, c: (x.sum(axis=1) * x.sum(axis=1)).sum(),
    "reshape_transpose": lambda x, c: (T.transpose(T.reshape(x, (x.shape[1], x.shape[0]))) * c["w"]).sum(),
    "getitem": lambda x, c: (x[1:, ::2] * x[1:, ::2]).sum() + x[[0, 0, 2], [1, 1, 0]].sum(),
    "concat": lambda x, c: (T.concat([x, x * 2.0], axis=1) * T.concat([c["w"], c["w"]], axis=1)).sum(),
    "matmul_left": lambda x, c: (T.matmul(x, c["m"]) * c["o"]).sum(),
    "matmul_right": lambda x, c: (T.matmul(c["mt"], x) * c["o2"]).sum(),
    "bmm": lambda x, c: (T.matmul(T.reshape(x, (1,) + x.shape), T.reshape(c["m"], (1,) + c["m"].shape)) * T.reshape(c["o"], (1,) + c["o"].shape)).sum(),
    "softmax": lambda x, c: (T.softmax(x) * c["w"]).sum(),
    "softmax_axis0": lambda x, c: (T.softmax(x, axis=0) * c["w"]).sum(),
    "log_softmax": lambda x, c: (T.log_softmax(x) * c["w"]).sum(),
    "log_softmax_masked": lambda x, c: (T.log_softmax(x, mask=c["mask"]) * c["w"]).sum(),
    "layer_norm_x": lambda x, c: (T.layer_norm(x, c["gain"], c["bias"]) * c["w"]).sum(),
    "l2_normalize": lambda x, c: (T.l2_normalize(x) * c["w"]).sum(),
    "dropout": lambda x, c: (T.dropout(x, 0.5, np.random.default_rng(9), training=True) * c["w"]).sum(),
}


def _consts(shape, rng):
    r, k = shape
    mask = rng.random(shape) < 0.7
    mask[:, 0] = True
    return {
        "b": Tensor(rng.normal(size=shape)),
        "w": Tensor(rng.normal(size=shape)),
        "bias": Tensor(rng.normal(size=k)),
        "gain": Tensor(rng.normal(size=k)),
        "m": Tensor(rng.normal(size=(k, 3))),
        "o": Tensor(rng.normal(size=(r, 3))),
        "mt": Tensor(rng.normal(size=(2, r))),
        "o2": Tensor(rng.normal(size=(2, k))),
        "mask": mask,
    }


@pytest.mark.parametrize("op", sorted(OPS))
@pytest.mark.parametrize("seed", range(5))
def test_op_gradients(op, seed, backend):
    rng = np.random.default_rng(seed)
    shape = (3, 4)
    consts = _consts(shape, rng)
    x = rng.normal(size=shape)
    rep = finite_diff_check(lambda t: OPS[op](t, consts), x, step=1e-5, tol=1e-4)
    assert rep.passed, f"{op}: max rel error {rep.max_rel_error:.2e}"


@pytest.mark.parametrize("seed", range(5))
def test_layer_norm_param_gradients(seed, backend):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 5)))
    w = Tensor(rng.normal(size=(3, 5)))
    bias = Tensor(rng.normal(size=5))
    assert finite_diff_check(lambda g: (T.layer_norm(x, g, bias) * w).sum(), rng.normal(size=5)).passed
    gain = Tensor(rng.normal(size=5))
    assert finite_diff_check(lambda b: (T.layer_norm(x, gain, b) * w).sum(), rng.normal(size=5)).passed


def test_shared_subexpression_accumulates():
    # f = (x*y) + (x*y)*x with x, y scalars; path-sum oracle: df/dx = y + 2xy, df/dy = x + x^2
    x, y = leaf([1.5]), leaf([-0.7])
    p = x * y
    (p + p * x).sum().backward()
    np.testing.assert_allclose(x.grad, [-0.7 + 2 * 1.5 * -0.7])
    np.testing.assert_allclose(y.grad, [1.5 + 1.5 ** 2])


def test_unsupported_broadcast_rejected():
    with pytest.raises(T.DimensionError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
rows = st.lists(finite, min_size=1, max_size=8)


@given(rows, finite)
def test_softmax_sums_to_one_and_shift_invariant(xs, c):
    x = np.array(xs)
    y = T.softmax(Tensor(x)).data
    assert abs(y.sum() - 1.0) < 1e-9
    np.testing.assert_allclose(T.softmax(Tensor(x + c)).data, y, atol=1e-12)


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=8).filter(lambda v: np.linalg.norm(v) > 1e-6))
def test_l2_normalize_idempotent(xs):
    once = T.l2_normalize(Tensor(xs)).data
    twice = T.l2_normalize(Tensor(once)).data
    assert abs(np.linalg.norm(once) - 1.0) < 1e-12
    np.testing.assert_allclose(twice, once, atol=1e-12)


@settings(max_examples=30)
@given(st.integers(1, 5), st.integers(2, 9), st.integers(0, 2**31 - 1))
def test_kernel_backends_agree(n, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, k)) * 3
    g = rng.normal(size=(n, k))
    gain, bias = rng.normal(size=k), rng.normal(size=k)
    for name, mod in _backends()[1:]:
        y0, t0 = _numpy.gelu_forward(x)
        y1, t1 = mod.gelu_forward(x)
        np.testing.assert_allclose(y1, y0, rtol=1e-12, atol=1e-13)
        np.testing.assert_allclose(mod.gelu_backward(x, t1, g), _numpy.gelu_backward(x, t0, g), rtol=1e-11, atol=1e-12)
        s = _numpy.softmax_forward(x)
        np.testing.assert_allclose(mod.softmax_forward(x), s, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(mod.softmax_backward(s, g), _numpy.softmax_backward(s, g), rtol=1e-11, atol=1e-13)
        ls = _numpy.log_softmax_forward(x)
        np.testing.assert_allclose(mod.log_softmax_forward(x), ls, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(mod.log_softmax_backward(ls, g), _numpy.log_softmax_backward(ls, g), rtol=1e-11, atol=1e-12)
        a = _numpy.layer_norm_forward(x, gain, bias, 1e-5)
        b = mod.layer_norm_forward(x, gain, bias, 1e-5)
        for u, v in zip(a, b):
            np.testing.assert_allclose(v, u, rtol=1e-11, atol=1e-12)
        for u, v in zip(_numpy.layer_norm_backward(g, a[1], a[2], gain), mod.layer_norm_backward(g, b[1], b[2], gain)):
            np.testing.assert_allclose(v, u, rtol=1e-10, atol=1e-11)


def test_grad_shape_matches_data():
    x = leaf(np.ones((2, 3)))
    (T.gelu(x) * 2.0).sum().backward()
    assert x.grad.shape == x.data.shape


def test_item_requires_single_element():
    with pytest.raises(T.DimensionError):
        Tensor([1.0, 2.0]).item()
