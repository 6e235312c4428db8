import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gpq.errors import InvalidConfig, InvalidDistribution, ShapeMismatch, ZeroVector
from gpq.numerics import SubspaceShape, intra_normalize, l2_normalize, scaled_softmax, shannon_entropy

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_subspace_shape_invariants():
    s = SubspaceShape(M=12, d=12, K=16)
    assert (s.D, s.bits, s.code_bytes) == (144, 48, 6)
    assert SubspaceShape(M=3, d=12).code_bytes == 2
    with pytest.raises(InvalidConfig):
        SubspaceShape(M=2, d=3, K=12)
    with pytest.raises(InvalidConfig):
        SubspaceShape(M=0, d=3)
    with pytest.raises(InvalidConfig):
        SubspaceShape.from_dims(10, 3)


def test_l2_normalize_examples():
    np.testing.assert_allclose(l2_normalize([3, 4]), [0.6, 0.8])
    np.testing.assert_array_equal(l2_normalize([1, 0, 0]), [1, 0, 0])
    with pytest.raises(ZeroVector):
        l2_normalize([0, 0])


@given(arrays(np.float64, 5, elements=finite), st.floats(1e-3, 1e3))
def test_l2_normalize_scale_invariant(v, c):
    if np.linalg.norm(v) < 1e-6:
        return
    np.testing.assert_allclose(l2_normalize(c * v), l2_normalize(v), atol=1e-12)
    assert abs(np.linalg.norm(l2_normalize(v)) - 1) < 1e-6


def test_intra_normalize_examples():
    shape = SubspaceShape(M=2, d=2)
    np.testing.assert_allclose(intra_normalize([3, 4, 0, 5], shape), [0.6, 0.8, 0, 1])
    with pytest.raises(ZeroVector) as err:
        intra_normalize([3, 4, 0, 0], shape)
    assert err.value.index == 1
    with pytest.raises(ShapeMismatch):
        intra_normalize([1, 2, 3], shape)


def test_intra_normalize_random_norms_and_idempotence(rng):
    shape = SubspaceShape(M=4, d=12)
    x = intra_normalize(rng.standard_normal(48), shape)
    np.testing.assert_allclose(np.linalg.norm(x.reshape(4, 12), axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(intra_normalize(x, shape), x, atol=1e-6)


def test_scaled_softmax_examples():
    np.testing.assert_allclose(scaled_softmax([0, 0, 0], 20), [1 / 3] * 3)
    p = scaled_softmax([1, 0], 20)
    assert p[0] > 0.999999
    assert p[0] == pytest.approx(1 / (1 + math.exp(-20)), abs=1e-15)
    np.testing.assert_allclose(scaled_softmax([5.0, -2.0, 1.0], 0), [1 / 3] * 3)
    with pytest.raises(ValueError):
        scaled_softmax([1.0, np.nan], 1.0)
    with pytest.raises(ValueError):
        scaled_softmax([1.0, 2.0], -1.0)


def test_scaled_softmax_no_overflow():
    p = scaled_softmax([1000.0, 0.0], 50.0)
    assert np.all(np.isfinite(p)) and p[0] == 1.0


@given(arrays(np.float64, 7, elements=finite), finite, st.floats(0, 50))
def test_scaled_softmax_shift_invariant(s, c, scale):
    p = scaled_softmax(s, scale)
    assert abs(p.sum() - 1) < 1e-9 and np.all(p >= 0)
    np.testing.assert_allclose(scaled_softmax(s + c, scale), p, atol=1e-9)


def test_entropy_examples():
    assert shannon_entropy([1, 0, 0, 0]) == 0
    assert shannon_entropy(np.full(10, 0.1)) == pytest.approx(math.log(10), abs=1e-12)
    assert shannon_entropy([0.5, 0.25, 0.25]) == pytest.approx(1.039720770839918, abs=1e-12)
    with pytest.raises(InvalidDistribution):
        shannon_entropy([0.5, 0.6])
    with pytest.raises(InvalidDistribution):
        shannon_entropy([1.5, -0.5])


@pytest.mark.parametrize("n", [2, 4, 16])
def test_entropy_bounded_by_log_n(n):
    rng = np.random.default_rng(n)
    for _ in range(200):
        p = rng.dirichlet(np.ones(n) * 0.5)
        h = shannon_entropy(p)
        assert 0 <= h < math.log(n)
    assert shannon_entropy(np.full(n, 1 / n)) == pytest.approx(math.log(n), abs=1e-12)
