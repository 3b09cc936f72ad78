import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tdcm.linalg import (
    IDENTITY,
    RELU,
    ActivationKind,
    DimensionError,
    ParameterError,
    ShapeError,
    apply_activation,
    random_orthonormal_rows,
    softmax_rows,
    symmetrize,
)


def test_softmax_equal_scores_uniform():
    np.testing.assert_allclose(softmax_rows(np.array([[0.0, 0.0]]), 1.0), [[0.5, 0.5]])


def test_softmax_log3_ratio():
    # exp(ln 3) / (1 + exp(ln 3)) = 3/4
    out = softmax_rows(np.array([[0.0, math.log(3.0)]]), 1.0)
    np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-15)


def test_softmax_low_temperature_is_one_hot():
    out = softmax_rows(np.array([[0.0, -50.0]]), 0.01)
    assert abs(out[0, 0] - 1.0) <= 1e-12
    assert out[0, 1] <= 1e-12


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_non_positive_tau(tau):
    with pytest.raises(ParameterError):
        softmax_rows(np.zeros((1, 2)), tau)


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
           elements=st.floats(-1e4, 1e4)),
    st.sampled_from([0.1, 0.5, 1.0, 5.0]),
)
def test_softmax_rows_sum_to_one(scores, tau):
    out = softmax_rows(scores, tau)
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


def test_symmetrize_examples():
    np.testing.assert_array_equal(symmetrize(np.array([[1.0, 2.0], [3.0, 4.0]])), [[1, 2.5], [2.5, 4]])
    sym = np.array([[1.0, -2.0], [-2.0, 7.0]])
    np.testing.assert_array_equal(symmetrize(sym), sym)
    skew = np.array([[0.0, 3.0], [-3.0, 0.0]])
    np.testing.assert_array_equal(symmetrize(skew), np.zeros((2, 2)))


def test_symmetrize_rejects_non_square():
    with pytest.raises(ShapeError):
        symmetrize(np.zeros((2, 3)))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6)).map(lambda t: (t[0], t[0])),
              elements=st.floats(-1e6, 1e6)))
def test_symmetrize_is_bitwise_symmetric(m):
    s = symmetrize(m)
    assert np.array_equal(s, s.T)


def test_activation_values():
    assert apply_activation(RELU, 0.0) == 0
    assert apply_activation(RELU, -3.0) == 0
    assert apply_activation(ActivationKind("leaky_relu", 0.1), -3.0) == pytest.approx(-0.3)
    assert apply_activation(IDENTITY, -3.0) == -3.0


def test_activation_parse_roundtrip():
    for text in ("relu", "identity", "leaky_relu:0.2"):
        assert str(ActivationKind.parse(text)) == text
    with pytest.raises(ParameterError):
        ActivationKind.parse("tanh")
    with pytest.raises(ParameterError):
        ActivationKind("leaky_relu", 1.5)


@pytest.mark.parametrize("kind", [IDENTITY, RELU, ActivationKind("leaky_relu", 0.05)])
def test_activations_are_monotone(kind):
    rng = np.random.default_rng(3)
    x, y = rng.normal(scale=10, size=(2, 2000))
    lo, hi = np.minimum(x, y), np.maximum(x, y)
    assert np.all(apply_activation(kind, lo) <= apply_activation(kind, hi))


@pytest.mark.parametrize("k,b", [(3, 3), (2, 3), (5, 16), (1, 4)])
def test_random_orthonormal_rows(k, b):
    r = random_orthonormal_rows(k, b, seed=11)
    assert r.shape == (k, b)
    assert np.max(np.abs(r @ r.T - np.eye(k))) <= 1e-10


def test_random_orthonormal_rows_deterministic():
    a = random_orthonormal_rows(3, 5, seed=7)
    b = random_orthonormal_rows(3, 5, seed=7)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, random_orthonormal_rows(3, 5, seed=8))


def test_random_orthonormal_rows_too_many():
    with pytest.raises(DimensionError, match="K=4.*b=3"):
        random_orthonormal_rows(4, 3, seed=0)
