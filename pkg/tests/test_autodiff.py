import doctest

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gdkl import autodiff as ad
from oracles import central_fd, random_psd, rel_err

seeds = st.integers(0, 2**32 - 1)


def test_module_doctest():
    result = doctest.testmod(ad)
    assert result.failed == 0 and result.attempted > 0


def _check(fn, *arrays, tol=1e-6):
    """Compare tape gradients of scalar ``fn(*nodes)`` with central differences."""
    nodes = [ad.Node(a, requires_grad=True) for a in arrays]
    grads = ad.backward(fn(*nodes), nodes)
    for i, a in enumerate(arrays):
        def f(flat, i=i):
            args = [ad.Node(x) for x in arrays]
            args[i] = ad.Node(flat.reshape(a.shape))
            return float(fn(*args).value)
        fd = central_fd(f, a.ravel(), 1e-6).reshape(a.shape)
        assert rel_err(grads[i], fd) <= tol, f"argument {i}"


UNARY = [ad.exp, ad.square, ad.softplus, ad.neg, lambda x: ad.log(ad.square(x) + 1.0),
         lambda x: ad.sqrt(ad.square(x) + 0.5), lambda x: ad.reciprocal(ad.square(x) + 0.5)]


@pytest.mark.parametrize("op", range(len(UNARY)))
def test_elementwise_grads(rng, op):
    _check(lambda x: ad.reduce_sum(UNARY[op](x) * np.arange(1.0, 7.0).reshape(2, 3)), rng.standard_normal((2, 3)))


def test_broadcast_grads(rng):
    _check(lambda a, b: ad.reduce_sum(ad.square(a * b + a / (ad.square(b) + 1.0) - b)),
           rng.standard_normal((3, 4)), rng.standard_normal((1, 4)))


def test_matmul_transpose_grads(rng):
    _check(lambda a, b: ad.reduce_sum(ad.square(a @ b.T)), rng.standard_normal((3, 2)), rng.standard_normal((4, 2)))


def test_indexing_and_concat_grads(rng):
    def fn(a):
        parts = ad.concat([a[1:], a[[0, 0, 2]]], axis=0)
        return ad.reduce_sum(ad.square(parts) * np.arange(15.0).reshape(5, 3))
    _check(fn, rng.standard_normal((3, 3)))


def test_reductions_and_reshape(rng):
    _check(lambda a: ad.mean(ad.square(ad.reduce_sum(a, axis=0, keepdims=True))) + ad.reduce_sum(ad.reshape(a, (-1,)) * 2.0),
           rng.standard_normal((4, 3)))


def test_diag_and_embed(rng):
    _check(lambda a: ad.reduce_sum(ad.square(ad.diag_embed(ad.diag(a)) + a)), rng.standard_normal((3, 3)))


def test_sqdist_grads(rng):
    _check(lambda a, b: ad.reduce_sum(ad.exp(-ad.sqdist(a, b))), rng.standard_normal((3, 2)), rng.standard_normal((4, 2)))
    A = rng.standard_normal((4, 2))
    _check(lambda a: ad.reduce_sum(ad.exp(-ad.sqdist(a, a))), A)


def test_sqdist_values(rng):
    A, B = rng.standard_normal((3, 2)), rng.standard_normal((4, 2))
    d = ad.sqdist(ad.Node(A), ad.Node(B)).value
    np.testing.assert_allclose(d, ((A[:, None] - B[None]) ** 2).sum(-1), atol=1e-12)
    a = ad.Node(A)
    assert np.all(np.diag(ad.sqdist(a, a).value) == 0)


@given(seeds, st.integers(1, 6))
def test_solve_psd(seed, n):
    rng = np.random.default_rng(seed)
    K = random_psd(rng, n, jitter=0.5)
    B = rng.standard_normal((n, 2))
    X = ad.solve_psd(ad.Node(K), ad.Node(B)).value
    np.testing.assert_allclose(X, np.linalg.solve(K, B), rtol=1e-8, atol=1e-10)
    _check(lambda a, b: ad.reduce_sum(ad.solve_psd(a @ a.T + np.eye(n), b) * np.ones((n, 2))),
           rng.standard_normal((n, n)), B, tol=1e-5)


@given(seeds, st.integers(1, 6))
def test_gaussian_logpdf(seed, n):
    from oracles import mvn_logpdf
    rng = np.random.default_rng(seed)
    K = random_psd(rng, n, jitter=0.5)
    Y = rng.standard_normal((n, 2))
    val = float(ad.gaussian_logpdf(ad.Node(K), ad.Node(Y)).value)
    assert abs(val - sum(mvn_logpdf(Y[:, c], K) for c in range(2))) < 1e-9
    _check(lambda a, y: ad.gaussian_logpdf(a @ a.T + np.eye(n), y), rng.standard_normal((n, n)), Y, tol=1e-5)


def test_unused_leaf_gets_zero_gradient():
    a = ad.Node(np.ones(3), requires_grad=True)
    b = ad.Node(np.ones(2), requires_grad=True)
    ga, gb = ad.backward(ad.reduce_sum(a), [a, b])
    np.testing.assert_array_equal(ga, 1.0)
    np.testing.assert_array_equal(gb, 0.0)


def test_shared_subexpression_accumulates():
    x = ad.Node(np.array(3.0), requires_grad=True)
    y = x * x
    (g,) = ad.backward(y + y * x, [x])
    assert abs(float(g) - (2 * 3 + 3 * 9)) < 1e-12
