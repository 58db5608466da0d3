import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from streamproto import numerics as nx

mpmath.mp.dps = 50

finite = st.floats(-30, 30, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(1, 8), elements=finite)


def mp_softmax(v):
    ex = [mpmath.exp(mpmath.mpf(x)) for x in v]
    s = mpmath.fsum(ex)
    return [float(e / s) for e in ex]


def mp_lse(v):
    return float(mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(x)) for x in v)))


# -- cosine -------------------------------------------------------------------


def test_cosine_examples():
    assert nx.cosine_similarity([1.0, 0.0], [1.0, 0.0]) == pytest.approx(1.0, abs=1e-15)
    assert nx.cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    exact = 11 / (math.sqrt(5) * math.sqrt(25))
    assert nx.cosine_similarity([1.0, 2.0], [3.0, 4.0]) == pytest.approx(exact, rel=1e-14)
    assert exact == pytest.approx(0.98387, abs=1e-5)


def test_cosine_degenerate():
    with pytest.raises(nx.DegenerateVectorError, match="degenerate vector"):
        nx.cosine_similarity([0.0, 0.0], [1.0, 0.0])


@given(vectors, st.data())
def test_cosine_bounded(a, data):
    b = data.draw(arrays(np.float64, a.shape, elements=finite))
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    c = float(nx.cosine_similarity(a, b))
    assert -1.0 - 1e-12 <= c <= 1.0 + 1e-12


# -- softmax / logsumexp / sigmoid -------------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax([0.0, 0.0]), [0.5, 0.5], rtol=0, atol=1e-15)
    for c in (-700.0, 0.0, 3.5, 700.0):
        np.testing.assert_allclose(nx.softmax([c, c, c]), [1 / 3] * 3, rtol=0, atol=1e-15)
    got = nx.softmax([9.0, 1.0, -5.0])
    np.testing.assert_allclose(got, mp_softmax([9, 1, -5]), rtol=1e-14)
    # the quoted figures are rounded loosely; the oracle above is the real check
    np.testing.assert_allclose(got, [9.9963e-1, 3.3529e-4, 8.28e-7], rtol=5e-3)


def test_empty_inputs_rejected():
    with pytest.raises(ValueError):
        nx.softmax([])
    with pytest.raises(ValueError):
        nx.logsumexp([])


@given(vectors, finite)
def test_softmax_sum_and_shift_invariance(v, c):
    p = nx.softmax(v)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p >= 0)
    np.testing.assert_allclose(nx.softmax(v + c), p, rtol=0, atol=1e-12)


@given(vectors)
def test_softmax_matches_mpmath(v):
    np.testing.assert_allclose(nx.softmax(v), mp_softmax(v), rtol=1e-12, atol=1e-300)


def test_logsumexp_examples():
    assert float(nx.logsumexp([0.0])) == 0.0
    a = 2.5
    assert float(nx.logsumexp([a, a])) == pytest.approx(a + math.log(2), rel=1e-15)
    assert float(nx.logsumexp([9.0, 1.0, -5.0])) == pytest.approx(mp_lse([9, 1, -5]), rel=1e-15)
    assert float(nx.logsumexp([9.0, 1.0, -5.0])) == pytest.approx(9.000335, abs=2e-6)


@given(vectors)
def test_logsumexp_bounds(v):
    lse = float(nx.logsumexp(v))
    assert lse >= v.max()
    assert lse == pytest.approx(mp_lse(v), rel=1e-13, abs=1e-13)


def test_sigmoid_examples():
    assert float(nx.sigmoid(0.0)) == 0.5
    s50 = float(nx.sigmoid(50.0))
    assert s50 <= 1.0 and float(mpmath.mpf(1) - mpmath.mpf(s50)) < 1e-20
    assert float(nx.sigmoid(3.0)) == pytest.approx(float(1 / (1 + mpmath.exp(-3))), rel=1e-15)
    assert float(nx.sigmoid(3.0)) == pytest.approx(0.952574, abs=1e-6)


@given(st.floats(-700, 700), st.floats(-700, 700))
def test_sigmoid_monotone_and_finite(x, y):
    sx, sy = float(nx.sigmoid(x)), float(nx.sigmoid(y))
    assert 0.0 <= sx <= 1.0 and math.isfinite(sx)
    if x <= y:
        assert sx <= sy


def test_softplus_inverse_roundtrip():
    for y in (1e-6, 0.1, 1.0, 5.0, 40.0):
        assert float(nx.softplus(nx.softplus_inverse(y))) == pytest.approx(y, rel=1e-12)


# -- tape -------------------------------------------------------------------------


def test_grad_identity_and_square():
    tape = nx.Tape()
    p = tape.param("p", 3.0)
    assert nx.grad(tape, p)["p"] == pytest.approx(1.0)
    tape = nx.Tape()
    p = tape.param("p", 3.0)
    assert nx.grad(tape, p * p)["p"] == pytest.approx(6.0)


def test_unreached_parameter_gets_zero():
    tape = nx.Tape()
    p = tape.param("p", [1.0, 2.0])
    tape.param("q", np.ones((2, 3)))
    g = nx.grad(tape, nx.sum_(p * p))
    np.testing.assert_array_equal(g["q"], np.zeros((2, 3)))
    np.testing.assert_allclose(g["p"], [2.0, 4.0])


def test_loss_not_on_tape():
    t1, t2 = nx.Tape(), nx.Tape()
    t1.param("p", 1.0)
    other = t2.param("p", 1.0)
    with pytest.raises(ValueError):
        nx.grad(t1, other)
    with pytest.raises(ValueError):
        nx.grad(t1, 1.0)


def test_detach_blocks_gradient():
    tape = nx.Tape()
    p = tape.param("p", 2.0)
    loss = nx.mul(p, nx.detach(p))
    assert nx.grad(tape, loss)["p"] == pytest.approx(2.0)


def test_max_subgradient_lowest_index():
    tape = nx.Tape()
    p = tape.param("p", [1.0, 3.0, 3.0])
    np.testing.assert_array_equal(nx.grad(tape, nx.max_(p))["p"], [0.0, 1.0, 0.0])


def _fd_check(fn, x0, h=1e-5):
    tape = nx.Tape()
    p = tape.param("x", x0)
    g = nx.grad(tape, fn(p))["x"]
    num = np.zeros_like(x0)
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e.reshape(-1)[i] = h
        num.reshape(-1)[i] = (float(fn(x0 + e)) - float(fn(x0 - e))) / (2 * h)
    err = np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-8)
    return float(err.max())


PRIMITIVES = {
    "exp": lambda x: nx.sum_(nx.exp(x)),
    "log": lambda x: nx.sum_(nx.log(nx.add(nx.mul(x, x), 1.0))),
    "tanh": lambda x: nx.sum_(nx.tanh(x)),
    "sigmoid": lambda x: nx.sum_(nx.sigmoid(x)),
    "softplus": lambda x: nx.sum_(nx.softplus(x)),
    "div": lambda x: nx.sum_(nx.div(x, nx.add(nx.mul(x, x), 2.0))),
    "logsumexp": lambda x: nx.logsumexp(x),
    "softmax": lambda x: nx.dot(nx.softmax(x), np.arange(x.shape[0], dtype=float)),
    "log_softmax": lambda x: nx.sum_(nx.mul(nx.log_softmax(x), np.linspace(0.1, 1, x.shape[0]))),
    "entropy": lambda x: nx.entropy_from_logits(x),
    "norm": lambda x: nx.norm(x),
    "normalize": lambda x: nx.dot(nx.normalize(x), np.linspace(-1, 1, x.shape[0])),
    "cosine": lambda x: nx.cosine_similarity(x, np.linspace(1, 2, x.shape[0])),
    "matmul": lambda x: nx.sum_(nx.tanh(nx.matmul(np.arange(12.0).reshape(3, 4) / 10, x))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name, rng):
    for _ in range(5):
        x0 = rng.uniform(-1.5, 1.5, size=4)
        assert _fd_check(PRIMITIVES[name], x0) < 1e-6, name


def test_row_cosine_gradient(rng):
    z = rng.standard_normal(3)

    def fn(P):
        return nx.sum_(nx.mul(nx.row_cosine(nx.reshape(P, (2, 3)), z), np.array([1.0, -2.0])))

    assert _fd_check(fn, rng.standard_normal(6)) < 1e-6


def test_two_layer_composite(rng):
    W2 = rng.standard_normal((2, 5))
    x = rng.standard_normal(3)

    def fn(w):
        W1 = nx.reshape(w, (5, 3))
        h = nx.tanh(nx.matmul(W1, x))
        return nx.logsumexp(nx.matmul(W2, h))

    for _ in range(3):
        assert _fd_check(fn, rng.standard_normal(15)) < 1e-6


def test_values_only_fast_path_returns_arrays():
    out = nx.softmax(np.array([1.0, 2.0]))
    assert isinstance(out, np.ndarray)
    assert not isinstance(nx.add(1.0, 2.0), nx.Node)
