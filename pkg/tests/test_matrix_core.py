import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bhra.matrix_core import (
    ShapeError,
    dumps_matrix,
    frobenius_norm,
    hadamard,
    loads_matrix,
    matmul,
    numeric_rank,
    spectral_norm,
    svd,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_matmul_examples():
    np.testing.assert_array_equal(matmul(np.eye(2), [[1, 2], [3, 4]]), [[1, 2], [3, 4]])
    np.testing.assert_array_equal(matmul([[1], [1]], [[1, 0]]), [[1, 0], [1, 0]])
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_hadamard_examples():
    m = np.array([[1.0, 2], [3, 4]])
    np.testing.assert_array_equal(hadamard(m, np.ones((2, 2))), m)
    np.testing.assert_array_equal(hadamard(m, [[1, 0], [1, 0]]), [[1, 0], [3, 0]])
    np.testing.assert_array_equal(hadamard(m, np.zeros((2, 2))), np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        hadamard(m, np.ones((2, 3)))


def test_rejects_non_finite():
    with pytest.raises(ValueError):
        matmul([[np.nan]], [[1.0]])


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_hadamard_commutes(a, b):
    np.testing.assert_array_equal(hadamard(a, b), hadamard(b, a))


def test_matmul_associative(rng):
    for _ in range(20):
        a, b, c = (rng.standard_normal((16, 16)) for _ in range(3))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        assert np.linalg.norm(left - right) <= 1e-12 * np.linalg.norm(left)


def test_svd_examples():
    np.testing.assert_allclose(svd(np.diag([3.0, 1.0])).singular_values, [3, 1])
    np.testing.assert_array_equal(svd(np.zeros((2, 2))).singular_values, [0, 0])


def _check_svd(m):
    res = svd(m, compute_vectors=True)
    s = res.singular_values
    assert np.all(np.diff(s) <= 0) and np.all(s >= 0)
    scale = max(1.0, np.linalg.norm(m))
    assert np.linalg.norm(res.reconstruct() - m) <= 1e-9 * scale
    k = len(s)
    assert np.max(np.abs(res.left_vectors.T @ res.left_vectors - np.eye(k))) <= 1e-9
    assert np.max(np.abs(res.right_vectors.T @ res.right_vectors - np.eye(k))) <= 1e-9


def test_svd_reconstructs_8x5(rng):
    _check_svd(rng.standard_normal((8, 5)))


def test_svd_random_suite(rng):
    for _ in range(200):
        m, n = rng.integers(1, 33, size=2)
        _check_svd(rng.standard_normal((m, n)))


def test_numeric_rank(rng):
    u, v = rng.standard_normal((5, 1)), rng.standard_normal((1, 7))
    assert numeric_rank(u @ v) == 1
    assert numeric_rank(np.zeros((4, 4))) == 0
    m = sum(rng.standard_normal((8, 1)) @ rng.standard_normal((1, 8)) for _ in range(3))
    assert numeric_rank(m) == 3
    with pytest.raises(ValueError):
        numeric_rank(m, tol=0)


@settings(max_examples=50)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_numeric_rank_bounded(m, n, seed):
    a = np.random.default_rng(seed).standard_normal((m, n))
    assert numeric_rank(a) <= min(m, n)


def test_norm_examples():
    assert frobenius_norm(np.eye(3)) == pytest.approx(np.sqrt(3), rel=1e-15)
    assert spectral_norm(np.eye(3)) == pytest.approx(1.0)
    d = np.array([[3.0, 0], [0, 4]])
    assert frobenius_norm(d) == pytest.approx(5.0)
    assert spectral_norm(d) == pytest.approx(4.0)
    assert frobenius_norm(np.zeros((3, 2))) == 0 and spectral_norm(np.zeros((3, 2))) == 0


def test_norm_routes_agree(rng):
    for _ in range(50):
        m = rng.standard_normal(tuple(rng.integers(1, 20, size=2)))
        s = svd(m).singular_values
        assert frobenius_norm(m) == pytest.approx(np.sqrt(np.sum(s**2)), rel=1e-10)
        assert frobenius_norm(m) ** 2 >= spectral_norm(m) ** 2 * (1 - 1e-12)


def test_frobenius_equals_spectral_for_rank_one(rng):
    m = rng.standard_normal((6, 1)) @ rng.standard_normal((1, 4))
    assert frobenius_norm(m) == pytest.approx(spectral_norm(m), rel=1e-12)
    full = rng.standard_normal((6, 4))
    assert frobenius_norm(full) > spectral_norm(full)


def test_text_round_trip(rng):
    m = rng.standard_normal((3, 4)) * 1e3
    text = dumps_matrix(m)
    assert text.splitlines()[0] == "3 4"
    np.testing.assert_array_equal(loads_matrix(text), m)


@pytest.mark.parametrize("bad", ["", "2 2\n1 2\n", "2 2\n1 2\n3\n", "x y\n", "1 1\nnan\n"])
def test_text_rejects_malformed(bad):
    with pytest.raises(ValueError):
        loads_matrix(bad)
