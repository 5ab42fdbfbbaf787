import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from anids.errors import NotPositiveDefinite
from anids.linalg3 import cholesky3, eigh3, invert3, outer3, solve_upper_t3, sym3, unit3

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def random_pd(rng, scale=1.0):
    a = rng.normal(size=(3, 3))
    return scale * (a @ a.T + 0.1 * np.eye(3))


def test_cholesky_identity_and_diagonal():
    assert np.array_equal(cholesky3(np.eye(3)), np.eye(3))
    assert np.allclose(cholesky3(np.diag([4.0, 9.0, 16.0])), np.diag([2.0, 3.0, 4.0]), atol=0)


def test_cholesky_worked_example():
    m = np.array([[2.0, 1, 0], [1, 2, 0], [0, 0, 1]])
    lo = cholesky3(m)
    assert lo[0, 0] == pytest.approx(1.414214, abs=1e-6)
    assert lo[1, 0] == pytest.approx(0.707107, abs=1e-6)
    assert lo[1, 1] == pytest.approx(1.224745, abs=1e-6)
    assert lo[2, 2] == 1.0
    assert np.allclose(lo @ lo.T, m, atol=1e-15)
    assert np.all(np.triu(lo, 1) == 0)


def test_cholesky_batched_reconstruction(rng):
    m = np.stack([random_pd(rng) for _ in range(200)])
    lo = cholesky3(m)
    err = np.abs(lo @ np.swapaxes(lo, -1, -2) - m).max(axis=(1, 2)) / np.abs(m).max(axis=(1, 2))
    assert err.max() <= 1e-12


@pytest.mark.parametrize("m", [np.zeros((3, 3)), -np.eye(3), np.diag([1.0, 1.0, 1e-13]),
                               np.array([[1.0, 2, 0], [2, 1, 0], [0, 0, 1]])])
def test_cholesky_rejects_non_pd(m):
    with pytest.raises(NotPositiveDefinite):
        cholesky3(m)


def test_invert_examples(rng):
    assert np.allclose(invert3(np.eye(3)), np.eye(3))
    assert np.allclose(invert3(0.04 * np.eye(3)), 25 * np.eye(3), rtol=1e-14)
    for _ in range(100):
        m = random_pd(rng)
        assert np.abs(m @ invert3(m) - np.eye(3)).max() <= 1e-10
    with pytest.raises(NotPositiveDefinite):
        invert3(-np.eye(3))


def test_solve_upper_t(rng):
    m = random_pd(rng)
    lo = cholesky3(m)
    b = rng.normal(size=3)
    assert np.allclose(lo.T @ solve_upper_t3(lo, b), b, atol=1e-12)


def test_eigh_identity():
    w, v = eigh3(np.eye(3))
    assert np.allclose(w, 1.0)
    assert np.allclose(v.T @ v, np.eye(3), atol=1e-12)


def test_eigh_rank_one_update():
    u = np.array([1.0, 0.0, 0.0])
    w, v = eigh3(np.eye(3) - 0.5 * outer3(u))
    assert np.allclose(w, [0.5, 1.0, 1.0], atol=1e-14)
    assert abs(abs(v[:, 0] @ u) - 1) < 1e-12


@given(arrays(float, 6, elements=finite))
def test_eigh_properties(e):
    m = sym3(*e)
    w, v = eigh3(m)
    scale = max(1.0, np.abs(m).max())
    assert np.all(np.diff(w) >= 0)
    assert np.abs(m @ v - v * w).max() <= 1e-9 * scale
    assert np.abs(v.T @ v - np.eye(3)).max() <= 1e-10
    assert abs(abs(np.linalg.det(v)) - 1) <= 1e-9
    assert np.abs(v @ np.diag(w) @ v.T - m).max() <= 1e-9 * scale
    assert np.allclose(w, np.linalg.eigvalsh(m), atol=1e-9 * scale)


def test_eigh_near_degenerate():
    u = unit3(np.array([1.0, 2.0, -0.5]))
    m = np.eye(3) - 1e-9 * outer3(u)
    w, v = eigh3(m)
    assert np.abs(m @ v - v * w).max() < 1e-12
    assert abs(abs(v[:, 0] @ u) - 1) < 1e-6


def test_sym3_symmetric_and_unit():
    m = sym3(1, 2, 3, 4, 5, 6)
    assert np.array_equal(m, m.T)
    assert abs(np.linalg.norm(unit3(np.array([3.0, 4.0, 12.0]))) - 1) <= 1e-12
