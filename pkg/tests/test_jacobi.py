"""Cyclic Jacobi eigensolver against the LAPACK oracle and frozen cases."""

import numpy as np
import pytest

from kvrot.errors import ShapeError
from kvrot.jacobi import jacobi_eigh


def _random_symmetric(rng, d):
    m = rng.standard_normal((d, d))
    return (m + m.T) / 2


def test_frozen_two_by_two():
    w, v = jacobi_eigh(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(w, [3.0, 1.0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(np.abs(v), np.full((2, 2), 0.7071067811865476), atol=1e-12)


def test_matches_lapack_eigenvalues(rng):
    for d in (1, 2, 3, 8, 17, 64):
        a = _random_symmetric(rng, d)
        w, v = jacobi_eigh(a)
        expected = np.linalg.eigvalsh(a)[::-1]
        np.testing.assert_allclose(w, expected, rtol=0, atol=1e-10 * max(1, np.abs(a).max()))
        # reconstruction closes the loop independently of eigenvalue order
        np.testing.assert_allclose((v * w) @ v.T, a, atol=1e-10 * max(1, np.abs(a).max()))


def test_columns_orthonormal(rng):
    a = _random_symmetric(rng, 32)
    _, v = jacobi_eigh(a)
    np.testing.assert_allclose(v.T @ v, np.eye(32), atol=1e-12)


def test_eigenvalues_descending(rng):
    w, _ = jacobi_eigh(_random_symmetric(rng, 48))
    assert np.all(np.diff(w) <= 1e-12)


def test_batched_matches_per_matrix(rng):
    # the batch shares the sweep loop, so individual matrices may receive
    # extra converged sweeps; results agree to solver tolerance, not bitwise
    batch = np.stack([_random_symmetric(rng, 12) for _ in range(6)])
    w, v = jacobi_eigh(batch)
    assert w.shape == (6, 12) and v.shape == (6, 12, 12)
    for i in range(6):
        wi, vi = jacobi_eigh(batch[i])
        np.testing.assert_allclose(w[i], wi, rtol=0, atol=1e-10)
        np.testing.assert_allclose((v[i] * w[i]) @ v[i].T, batch[i], atol=1e-10)
        np.testing.assert_allclose((vi * wi) @ vi.T, batch[i], atol=1e-10)


def test_diagonal_input_is_exact():
    w, v = jacobi_eigh(np.diag([3.0, -1.0, 7.0, 0.5]))
    np.testing.assert_array_equal(w, [7.0, 3.0, 0.5, -1.0])
    # no rotations fire, columns are the permuted identity
    np.testing.assert_array_equal(np.abs(v), np.eye(4)[:, [2, 0, 3, 1]])


def test_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        jacobi_eigh(np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        jacobi_eigh(np.zeros((300, 300)))
    with pytest.raises(ShapeError):
        jacobi_eigh(np.zeros(4))
