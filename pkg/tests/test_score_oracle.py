import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from anids import moldata
from anids import score_oracle as so
from anids.moldata import ToyPotential
from anids.score_oracle import MixtureModel, TemperatureContext

from conftest import random_rotation


def _spd(rng, shape, scale=0.05):
    m = rng.normal(size=shape + (3, 3)) * scale
    return m @ np.swapaxes(m, -1, -2) + scale**2 * np.eye(3)


def _random_model(rng, k=3, n=2):
    return MixtureModel(rng.normal(size=(k, n, 3)) * 0.3, _spd(rng, (k, n)))


# -- density ------------------------------------------------------------------------

def test_density_at_center():
    rng = np.random.default_rng(0)
    cov = _spd(rng, (1, 3))
    model = MixtureModel(rng.normal(size=(1, 3, 3)), cov)
    expect = -0.5 * sum(math.log((2 * math.pi) ** 3 * np.linalg.det(c)) for c in cov[0])
    assert so.mixture_log_density(model, model.centers[0]) == pytest.approx(expect, rel=1e-12)


def test_reflection_symmetry():
    mu = np.array([[0.3, -0.1, 0.2]])
    model = MixtureModel(np.stack([mu, -mu]), 0.01 * np.eye(3))
    x = np.array([[0.05, 0.2, -0.1]])
    assert so.mixture_log_density(model, x) == pytest.approx(so.mixture_log_density(model, -x), rel=1e-13)


def test_density_normalises_on_grid():
    rng = np.random.default_rng(4)
    model = MixtureModel(rng.normal(size=(3, 1, 3)) * 0.3, _spd(rng, (3, 1), scale=0.15))
    lo = model.centers.min() - 1.5
    hi = model.centers.max() + 1.5
    g = np.linspace(lo, hi, 41)
    dx = g[1] - g[0]
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 1, 3)
    total = sum(math.exp(so.mixture_log_density(model, p)) for p in pts) * dx**3
    assert abs(total - 1.0) < 0.005


def test_far_components_do_not_underflow():
    model = MixtureModel(np.array([[[0.0, 0, 0]], [[100.0, 0, 0]]]), 1e-4 * np.eye(3))
    x = np.array([[50.0, 0, 0]])
    assert np.isfinite(so.mixture_log_density(model, x))
    np.testing.assert_allclose(so.mixture_score(model, x), 0.0, atol=1e-6)


# -- score ------------------------------------------------------------------------------

def test_single_component_score(rng):
    cov = _spd(rng, (1, 2))
    model = MixtureModel(rng.normal(size=(1, 2, 3)), cov)
    x = model.centers[0] + rng.normal(size=(2, 3)) * 0.1
    expect = -np.linalg.solve(cov[0], (x - model.centers[0])[..., None])[..., 0]
    np.testing.assert_allclose(so.mixture_score(model, x), expect, rtol=1e-10)
    np.testing.assert_array_equal(so.nearest_component_approx(model, x), so.mixture_score(model, x))


def test_midpoint_score_is_zero():
    mu = np.array([[0.2, 0.0, 0.0]])
    model = MixtureModel(np.stack([mu, -mu]), 0.01 * np.eye(3))
    np.testing.assert_allclose(so.mixture_score(model, np.zeros((1, 3))), 0.0, atol=1e-12)


def test_score_matches_finite_differences_sweep():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        model = _random_model(rng, k=3, n=2)
        x = model.centers[rng.integers(3)] + rng.normal(size=(2, 3)) * 0.05
        s = so.mixture_score(model, x)
        num = so.finite_difference_gradient(lambda y: so.mixture_log_density(model, y), x, h=1e-6)
        worst = max(worst, np.max(np.abs(num - s)) / max(1.0, np.max(np.abs(s))))
    assert worst <= 1e-5


@given(st.integers(0, 2**32 - 1))
def test_score_equivariance(seed):
    rng = np.random.default_rng(seed)
    model = _random_model(rng)
    x = rng.normal(size=(2, 3)) * 0.3
    q = random_rotation(rng)
    rot = MixtureModel(model.centers @ q.T, q @ model.covariances @ q.T)
    np.testing.assert_allclose(so.mixture_score(rot, x @ q.T), so.mixture_score(model, x) @ q.T,
                               atol=1e-8 * max(1.0, np.abs(so.mixture_score(model, x)).max()))


def test_nearest_component_with_wide_separation(rng):
    sigma = 0.01
    centers = np.array([[[0.0, 0, 0]], [[100 * sigma, 0, 0]], [[0, 100 * sigma, 0]]])
    model = MixtureModel(centers, sigma**2 * np.eye(3))
    x = centers[0] + rng.normal(size=(1, 3)) * sigma
    exact = so.mixture_score(model, x)
    np.testing.assert_allclose(so.nearest_component_approx(model, x), exact, atol=1e-6)


def test_nearest_component_coincident():
    centers = np.zeros((2, 1, 3))
    model = MixtureModel(centers, 0.01 * np.eye(3))
    x = np.array([[0.1, -0.05, 0.02]])
    np.testing.assert_allclose(so.nearest_component_approx(model, x), so.mixture_score(model, x), rtol=1e-14)


def test_responsibilities_sum_to_one(rng):
    model = _random_model(rng, k=5)
    w = model.responsibilities(rng.normal(size=(2, 3)))
    assert w.sum() == pytest.approx(1.0, abs=1e-14) and np.all(w >= 0)


# -- Boltzmann scores -----------------------------------------------------------------------

def test_temperature_must_be_positive():
    with pytest.raises(ValueError):
        TemperatureContext(0.0)


def test_harmonic_equilibrium_score_is_zero():
    pot = moldata.harmonic_well(k=1.0, n_atoms=2)
    np.testing.assert_array_equal(so.boltzmann_score(pot, TemperatureContext(0.1), pot.reference), 0.0)


def test_harmonic_score_example():
    pot = moldata.harmonic_well(k=1.0)
    x = pot.reference + [[0.2, 0.0, 0.0]]
    np.testing.assert_allclose(so.boltzmann_score(pot, TemperatureContext(0.1), x), [[-2.0, 0.0, 0.0]], rtol=1e-14)


def test_lj_dimer_score_matches_finite_differences():
    pot = ToyPotential("lennard-jones", [1, 1], [[0, 0, 0], [1.2, 0, 0]], epsilon=0.5, sigma=1.0)
    tc = TemperatureContext(0.2)
    x = pot.reference + np.array([[0.01, -0.02, 0.03], [0.0, 0.02, -0.01]])
    num = so.finite_difference_gradient(lambda y: -pot.energy(y) / tc.kT, x)
    np.testing.assert_allclose(so.boltzmann_score(pot, tc, x), num, rtol=1e-6, atol=1e-8)


def test_harmonic_gaussian_consistency(rng):
    a = rng.normal(size=(3, 3, 3))
    tether = a @ np.swapaxes(a, 1, 2) + np.eye(3)
    pot = ToyPotential("harmonic", [1, 6, 8], rng.normal(size=(3, 3)), tether=tether)
    tc = TemperatureContext(0.05)
    model = so.harmonic_gaussian(pot, tc)
    for _ in range(20):
        x = pot.reference + rng.normal(size=(3, 3)) * 0.1
        np.testing.assert_allclose(so.mixture_score(model, x), so.boltzmann_score(pot, tc, x), rtol=1e-10, atol=1e-12)


def test_harmonic_gaussian_rejects_bonds():
    with pytest.raises(ValueError):
        so.harmonic_gaussian(moldata.harmonic_diatomic(), TemperatureContext(0.1))
