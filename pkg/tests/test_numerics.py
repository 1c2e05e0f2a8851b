import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import ndtr

from dua import numerics as nx
from dua.numerics import Tensor, grad_check


def leaf(values, dtype=np.float64):
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True)


# -- forward values ------------------------------------------------------------

@pytest.mark.parametrize(
    "x, W, b, expected",
    [
        ([1, 2], np.eye(2), [0, 0], [1, 2]),
        ([1, 1], [[1, 0], [0, 1]], [3, 3], [4, 4]),
        ([2, 3], [[1], [1]], [0], [5]),
    ],
)
def test_linear_examples(x, W, b, expected):
    out = nx.linear(Tensor(np.array(x, float)), Tensor(np.array(W, float)), Tensor(np.array(b, float)))
    np.testing.assert_allclose(out.data, expected)


def test_linear_rejects_mismatched_width():
    with pytest.raises(nx.DimensionError):
        nx.linear(Tensor(np.ones(3)), Tensor(np.ones((2, 2))), Tensor(np.zeros(2)))


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax(Tensor(np.ones(3))).data, [1 / 3] * 3)
    np.testing.assert_allclose(nx.softmax(Tensor(np.array([4.2]))).data, [1.0])
    np.testing.assert_allclose(nx.softmax(Tensor(np.array([0.0, np.log(3.0)]))).data, [0.25, 0.75])


def test_softmax_on_leading_axis():
    x = np.random.default_rng(0).normal(size=(4, 3))
    out = nx.softmax(Tensor(x), axis=0).data
    expected = np.exp(x) / np.exp(x).sum(axis=0, keepdims=True)
    np.testing.assert_allclose(out, expected, rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 9)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_softmax_sums_to_one_for_large_inputs(x):
    out = nx.softmax(Tensor(x), axis=-1).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


def test_layer_norm_examples():
    g1, b0 = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_allclose(nx.layer_norm(Tensor(np.full(3, 5.0)), g1, b0).data, [0, 0, 0])
    out = nx.layer_norm(Tensor(np.array([1.0, -1.0])), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [1, -1], atol=1e-5)
    out = nx.layer_norm(Tensor(np.array([3.0, -8.0])), Tensor(np.zeros(2)), Tensor(np.full(2, 7.0))).data
    np.testing.assert_allclose(out, [7, 7])


@settings(max_examples=60, deadline=None)
@given(st.integers(8, 64), st.floats(1.0, 100.0), st.floats(-50, 50), st.integers(0, 10_000))
def test_layer_norm_normalises(d, scale, shift, seed):
    x = np.random.default_rng(seed).normal(size=(3, d))
    # rescale each row to variance exactly scale**2 so the >= 1 precondition holds
    x = (x - x.mean(axis=1, keepdims=True)) / x.std(axis=1, keepdims=True) * scale + shift
    out = nx.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    assert np.all(np.abs(out.mean(axis=1)) <= 1e-6)
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-3)


def test_gelu_examples():
    out = nx.gelu(Tensor(np.array([0.0, 10.0, 1.0]))).data
    np.testing.assert_allclose(out, [0.0, 10.0, 0.8413447], atol=1e-6)


def test_gelu_float32_matches_exact_form():
    x = np.linspace(-8, 8, 4001)
    exact = x * ndtr(x)
    approx = nx.gelu(Tensor(x.astype(np.float32))).data
    assert approx.dtype == np.float32
    assert np.max(np.abs(approx - exact)) < 2e-6


# -- backward ------------------------------------------------------------------

def test_backward_examples():
    x = leaf([1.0, 2.0, 3.0])
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])

    x = leaf([1.0, 2.0])
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [2, 4])


def test_cross_entropy_stationary_at_optimum():
    logits = leaf([[40.0, -40.0]])
    nx.cross_entropy(logits, np.array([0])).backward()
    assert np.max(np.abs(logits.grad)) < 1e-12


def test_gradients_accumulate_until_zeroed():
    x = leaf([1.0, 2.0])
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, [6, 6])
    nx.zero_grad([x])
    assert x.grad is None


def test_backward_needs_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(nx.UsageError):
        (x * 2.0).backward()


def test_shared_subexpression_gets_both_paths():
    x = leaf([3.0])
    y = x * x
    (y + y * x).sum().backward()
    # d/dx (x^2 + x^3) = 2x + 3x^2
    np.testing.assert_allclose(x.grad, [6 + 27])


def test_deep_chain_does_not_recurse():
    x = leaf([1.0])
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [1.0])


# -- per-op finite-difference checks --------------------------------------------

def _rng_leaf(rng, shape, low=-1.0, high=1.0):
    return leaf(rng.uniform(low, high, size=shape))


PRIMITIVES = {
    "add_broadcast": lambda r: (lambda a=_rng_leaf(r, (3, 4)), b=_rng_leaf(r, (4,)): ((a + b) ** 2).sum(), 2),
    "sub": lambda r: (lambda a=_rng_leaf(r, (3,)), b=_rng_leaf(r, (3,)): ((a - b) ** 2).sum(), 2),
    "mul": lambda r: (lambda a=_rng_leaf(r, (2, 3)), b=_rng_leaf(r, (2, 1)): (a * b).sum(), 2),
    "div": lambda r: (lambda a=_rng_leaf(r, (3,)), b=_rng_leaf(r, (3,), 1.0, 2.0): (a / b).sum(), 2),
    "exp_log": lambda r: (lambda a=_rng_leaf(r, (4,), 0.5, 2.0): (nx.log(a) * nx.exp(a)).sum(), 1),
    "relu": lambda r: (lambda a=leaf([-0.7, 0.3, 1.2, -0.1]): (nx.relu(a) * a).sum(), 1),
    "sigmoid": lambda r: (lambda a=_rng_leaf(r, (5,)): (nx.sigmoid(a) ** 2).sum(), 1),
    "gelu": lambda r: (lambda a=_rng_leaf(r, (5,), -3, 3): (nx.gelu(a) ** 2).sum(), 1),
    "matmul_batched": lambda r: (lambda a=_rng_leaf(r, (2, 3, 4)), b=_rng_leaf(r, (4, 2)): (nx.matmul(a, b) ** 2).sum(), 2),
    "linear": lambda r: (lambda x=_rng_leaf(r, (2, 3, 4)), W=_rng_leaf(r, (4, 5)), b=_rng_leaf(r, (5,)):
                         (nx.linear(x, W, b) ** 2).sum(), 3),
    "softmax": lambda r: (lambda a=_rng_leaf(r, (3, 4)), w=Tensor(r.normal(size=(3, 4))): (nx.softmax(a, -1) * w).sum(), 1),
    "softmax_axis0": lambda r: (lambda a=_rng_leaf(r, (3, 4)), w=Tensor(r.normal(size=(3, 4))): (nx.softmax(a, 0) * w).sum(), 1),
    "log_softmax": lambda r: (lambda a=_rng_leaf(r, (3, 4)), w=Tensor(r.normal(size=(3, 4))): (nx.log_softmax(a) * w).sum(), 1),
    "layer_norm": lambda r: (lambda x=_rng_leaf(r, (3, 6)), g=_rng_leaf(r, (6,)), b=_rng_leaf(r, (6,)),
                             w=Tensor(r.normal(size=(3, 6))): (nx.layer_norm(x, g, b) * w).sum(), 3),
    "mean_axis": lambda r: (lambda a=_rng_leaf(r, (3, 4)): (a.mean(axis=0) ** 2).sum(), 1),
    "reshape_transpose": lambda r: (lambda a=_rng_leaf(r, (2, 6)): (a.reshape(3, 4).T ** 3).sum(), 1),
    "getitem_fancy": lambda r: (lambda a=_rng_leaf(r, (5, 2)): (a[np.array([0, 0, 3])] ** 2).sum(), 1),
    "getitem_slice": lambda r: (lambda a=_rng_leaf(r, (5, 4)): (a[1:4, ::2] ** 2).sum(), 1),
    "concat_stack": lambda r: (lambda a=_rng_leaf(r, (2, 3)), b=_rng_leaf(r, (1, 3)):
                               (nx.stack([nx.concat([a, b], 0), nx.concat([b, a], 0)], 1) ** 2).sum(), 2),
    "broadcast_to": lambda r: (lambda a=_rng_leaf(r, (1, 3)): (nx.broadcast_to(a, (4, 3)) ** 2).sum(), 1),
    "masked_fill": lambda r: (lambda a=_rng_leaf(r, (2, 3)):
                              (nx.softmax(nx.masked_fill(a, np.array([[1, 0, 1], [1, 1, 0]], bool))) ** 2).sum(), 1),
    "scatter_rows": lambda r: (lambda a=_rng_leaf(r, (2, 3)): (nx.scatter_rows(a, np.array([3, 1]), 5) ** 2).sum(), 1),
    "cross_entropy": lambda r: (lambda a=_rng_leaf(r, (4, 3)): nx.cross_entropy(a, np.array([0, 2, 1, 2])), 1),
    "bce": lambda r: (lambda a=_rng_leaf(r, (4,), 0.1, 0.9): nx.binary_cross_entropy(a, np.array([0, 1, 1, 0])), 1),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_central_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    fn, n_params = PRIMITIVES[name](rng)
    params = list(fn.__defaults__[:n_params])
    report = grad_check(fn, params, h=1e-6, tol=1e-4)
    assert report.passed, report.flagged[:3]


def test_grad_check_quadratic_is_exact():
    x = leaf([0.3, -1.2, 2.0])
    A = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, 0.3], [0.0, 0.3, 3.0]])
    report = grad_check(lambda: nx.matmul(x.reshape(1, 3), Tensor(A) @ x.reshape(3, 1)).sum(), [x])
    assert report.max_rel_error < 1e-8


def test_grad_check_flags_corrupted_backward():
    x = leaf([0.5, -0.25, 1.5])

    def broken():
        y = x * x
        good = y._backward
        y._backward = lambda g: [gi * 1.5 for gi in good(g)]
        return y.sum()

    report = grad_check(broken, [x])
    assert not report.passed
    assert report.flagged
    assert "FAIL" in report.summary()


# -- gradient reversal ----------------------------------------------------------

@pytest.mark.parametrize("lam", [0.0, 0.3, 0.5, 1.0])
def test_grad_reverse_is_identity_forward_and_negated_backward(lam):
    z = leaf([1.5, -2.0])
    out = nx.grad_reverse(z, lam)
    np.testing.assert_array_equal(out.data, z.data)
    g = np.array([0.7, -3.1])
    out.backward(g)
    np.testing.assert_array_equal(z.grad, -lam * g)


def test_ops_are_deterministic():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 7))
    a = nx.layer_norm(nx.gelu(Tensor(x)), Tensor(np.ones(7)), Tensor(np.zeros(7))).data
    b = nx.layer_norm(nx.gelu(Tensor(x)), Tensor(np.ones(7)), Tensor(np.zeros(7))).data
    assert a.tobytes() == b.tobytes()
