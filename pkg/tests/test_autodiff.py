import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rnce import autodiff as ad

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def _grad(fn, **arrays):
    p = ad.ParameterVector((k, np.asarray(v, dtype=np.float64)) for k, v in arrays.items())
    return ad.value_and_grad(lambda q: fn(**q), p)


def test_elementwise_gradients_match_closed_form():
    x = np.array([0.3, -1.2, 2.0])
    _, g = _grad(lambda a: ad.total(ad.mul(ad.exp(a), ad.tanh(a))), a=x)
    want = np.exp(x) * np.tanh(x) + np.exp(x) * (1 - np.tanh(x) ** 2)
    np.testing.assert_allclose(g["a"], want, rtol=1e-12)


def test_matmul_and_broadcast_gradients():
    rng = np.random.default_rng(0)
    A, B, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(2,))
    _, g = _grad(lambda A, B, c: ad.total(ad.square(ad.add(ad.matmul(A, B), c))), A=A, B=B, c=c)
    R = A @ B + c
    np.testing.assert_allclose(g["A"], 2 * R @ B.T, rtol=1e-12)
    np.testing.assert_allclose(g["B"], 2 * A.T @ R, rtol=1e-12)
    np.testing.assert_allclose(g["c"], 2 * R.sum(0), rtol=1e-12)


def test_log_softmax_gradient_is_softmax_residual():
    s = np.array([[0.1, 2.0, -1.0], [3.0, 3.0, 0.0]])
    _, g = _grad(lambda s: ad.total(ad.getitem(ad.log_softmax(s, axis=1), (slice(None), 0))), s=s)
    q = np.exp(s - s.max(1, keepdims=True))
    q /= q.sum(1, keepdims=True)
    want = -q
    want[:, 0] += 1
    np.testing.assert_allclose(g["s"], want, atol=1e-14)


def test_unused_input_gets_zero_gradient():
    _, g = _grad(lambda a, b: ad.total(ad.square(a)), a=np.ones(2), b=np.ones(3))
    np.testing.assert_array_equal(g["b"], np.zeros(3))


def test_shared_subexpression_accumulates():
    _, g = _grad(lambda a: ad.total(ad.mul(a, a)), a=np.array([1.5, -2.0]))
    np.testing.assert_allclose(g["a"], [3.0, -4.0])


def test_nonscalar_output_rejected():
    tape = ad.Tape()
    v = tape.variable(np.ones(3))
    with pytest.raises(ad.ShapeError):
        tape.gradient(ad.mul(v, 2.0), [v])


def test_nonfinite_forward_raises():
    with pytest.raises(ad.NonFiniteError):
        _grad(lambda a: ad.total(ad.log(a)), a=np.array([-1.0]))


def test_swish_grad_gradient_finite_difference():
    p = ad.ParameterVector([("a", np.array([-2.0, -0.1, 0.4, 3.0]))])
    err = ad.finite_difference_check(lambda q: ad.total(ad.swish_grad(q["a"])), p, step=1e-6)
    assert err < 1e-6


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 5), elements=finite))
def test_logsumexp_matches_reference_and_shift(a):
    from scipy.special import logsumexp

    np.testing.assert_allclose(ad.logsumexp(a, axis=1), logsumexp(a, axis=1), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(ad.logsumexp(a + 7.0, axis=1), logsumexp(a, axis=1) + 7.0, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (2,), elements=finite))
def test_composite_gradient_finite_difference(w, b):
    p = ad.ParameterVector([("w", w), ("b", b)])
    x = np.linspace(-1, 1, 6).reshape(2, 3)

    def f(q):
        h = ad.tanh(ad.add(ad.matmul(x, q["w"]), q["b"]))
        return ad.mean(ad.square(ad.sigmoid(h)))

    _, g = ad.value_and_grad(f, p)
    x0, g = p.flatten(), g.flatten()
    for i in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += 1e-6
        xm[i] -= 1e-6
        fd = (f(p.unflatten(xp)) - f(p.unflatten(xm))) / 2e-6
        # mixed tolerance: saturated units make some gradients vanish
        assert abs(fd - g[i]) <= 1e-5 * (abs(g[i]) + 1e-4)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (7,), elements=finite))
def test_flatten_roundtrip(v):
    p = ad.ParameterVector([("a", v[:3].reshape(3, 1)), ("b", v[3:])])
    q = p.unflatten(p.flatten())
    assert list(q) == list(p)
    for k in p:
        np.testing.assert_array_equal(q[k], p[k])


def test_prefixed_select_roundtrip():
    p = ad.ParameterVector([("w", np.ones(2)), ("b", np.zeros(1))])
    assert list(p.prefixed("m/").select("m/")) == ["w", "b"]
