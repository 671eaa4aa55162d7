"""Jacobi eigensolver against numpy's LAPACK-backed eigh."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from resinsort.linalg import jacobi_eigh, off_norm, sign_normalize


def random_symmetric(rng, n):
    a = rng.normal(size=(n, n))
    return a + a.T


class TestJacobi:
    @pytest.mark.parametrize("n", [1, 2, 3, 4, 7, 10, 16, 33])
    def test_matches_numpy(self, rng, n):
        a = random_symmetric(rng, n)
        values, vectors = jacobi_eigh(a)
        ref_values, ref_vectors = np.linalg.eigh(a)
        np.testing.assert_allclose(values, ref_values[::-1], atol=1e-10)
        # eigenvectors agree up to sign
        ref = sign_normalize(ref_vectors[:, ::-1])
        np.testing.assert_allclose(vectors, ref, atol=1e-8)

    def test_descending_and_orthonormal(self, rng):
        values, vectors = jacobi_eigh(random_symmetric(rng, 12))
        assert np.all(np.diff(values) <= 0)
        np.testing.assert_allclose(vectors.T @ vectors, np.eye(12), atol=1e-12)

    def test_reconstructs_matrix(self, rng):
        a = random_symmetric(rng, 9)
        values, vectors = jacobi_eigh(a)
        np.testing.assert_allclose(vectors @ np.diag(values) @ vectors.T, a, atol=1e-10)

    def test_sign_convention(self, rng):
        _, vectors = jacobi_eigh(random_symmetric(rng, 8))
        idx = np.argmax(np.abs(vectors), axis=0)
        assert np.all(vectors[idx, np.arange(8)] > 0)

    def test_diagonal_input(self):
        values, vectors = jacobi_eigh(np.diag([1.0, 3.0, 2.0]))
        np.testing.assert_array_equal(values, [3.0, 2.0, 1.0])
        np.testing.assert_array_equal(np.abs(vectors), np.eye(3)[:, [1, 2, 0]])

    def test_zero_matrix(self):
        values, vectors = jacobi_eigh(np.zeros((4, 4)))
        np.testing.assert_array_equal(values, np.zeros(4))
        np.testing.assert_array_equal(vectors, np.eye(4))

    def test_rank_one(self):
        u = np.array([1.0, 2.0, 2.0]) / 3.0
        values, vectors = jacobi_eigh(5.0 * np.outer(u, u))
        np.testing.assert_allclose(values, [5.0, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(vectors[:, 0], u, atol=1e-12)

    def test_deterministic(self, rng):
        a = random_symmetric(rng, 11)
        v1, w1 = jacobi_eigh(a)
        v2, w2 = jacobi_eigh(a.copy())
        np.testing.assert_array_equal(v1, v2)
        np.testing.assert_array_equal(w1, w2)

    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            jacobi_eigh(np.zeros((2, 3)))

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            jacobi_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_off_norm(self):
        assert off_norm(np.array([[1.0, 3.0], [4.0, 2.0]])) == 5.0

    @given(st.integers(2, 9), st.integers(0, 10_000))
    def test_trace_and_spectrum_property(self, n, seed):
        a = random_symmetric(np.random.default_rng(seed), n)
        values, vectors = jacobi_eigh(a)
        assert np.isclose(values.sum(), np.trace(a), atol=1e-9)
        np.testing.assert_allclose(a @ vectors, vectors * values, atol=1e-9)
