"""Ground-truth densities and scores used to check the denoising objective.

A :class:`MixtureModel` is the noised data distribution: one Gaussian
component per clean structure, factorised over atoms.  Its score is what an
ideal denoiser predicts.  For a Boltzmann distribution the score is the force
divided by ``k_B T``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .linalg3 import cholesky3, invert3, solve_lower3
from .moldata import ToyPotential

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class MixtureModel:
    """Uniform mixture ``(1/K) sum_k prod_i N(x_i; X_i^(k), Sigma_i^(k))``."""

    centers: np.ndarray  # (K, N, 3)
    covariances: np.ndarray  # (K, N, 3, 3)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float)
        if self.centers.ndim == 2:
            self.centers = self.centers[None]
        k, n, _ = self.centers.shape
        cov = np.asarray(self.covariances, dtype=float)
        self.covariances = np.array(np.broadcast_to(cov, (k, n, 3, 3)))
        self._chol = cholesky3(self.covariances)
        self._prec = invert3(self.covariances)
        self._logdet = 2.0 * np.sum(np.log(np.diagonal(self._chol, axis1=-2, axis2=-1)), axis=-1)

    @property
    def n_components(self) -> int:
        return self.centers.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.centers.shape[1]

    def component_log_densities(self, x) -> np.ndarray:
        """``ln q(x | X^(k))`` for every component, shape ``(K,)``."""
        d = np.asarray(x, dtype=float).reshape(self.n_atoms, 3)[None] - self.centers
        z = solve_lower3(self._chol, d)
        maha = np.sum(z * z, axis=(-1, -2))
        return -0.5 * (maha + np.sum(self._logdet, axis=-1) + 3 * self.n_atoms * LOG_2PI)

    def responsibilities(self, x) -> np.ndarray:
        lp = self.component_log_densities(x)
        return np.exp(lp - logsumexp(lp))

    def component_scores(self, x) -> np.ndarray:
        """``-Sigma_i^(k)^{-1} (x_i - X_i^(k))``, shape ``(K, N, 3)``."""
        d = np.asarray(x, dtype=float).reshape(self.n_atoms, 3)[None] - self.centers
        return -np.einsum("knij,knj->kni", self._prec, d)


def mixture_log_density(model: MixtureModel, x) -> float:
    return float(logsumexp(model.component_log_densities(x)) - math.log(model.n_components))


def mixture_score(model: MixtureModel, x) -> np.ndarray:
    """Gradient of :func:`mixture_log_density`: responsibility-weighted component scores."""
    w = model.responsibilities(x)
    return np.einsum("k,kni->ni", w, model.component_scores(x))


def nearest_component_approx(model: MixtureModel, x) -> np.ndarray:
    """Score of the single most responsible component."""
    k = int(np.argmax(model.component_log_densities(x)))
    return model.component_scores(x)[k]


@dataclass(frozen=True)
class TemperatureContext:
    kT: float  # eV

    def __post_init__(self):
        if not self.kT > 0:
            raise ValueError("kT must be positive")


def boltzmann_score(pot: ToyPotential, tc: TemperatureContext, x) -> np.ndarray:
    """``grad ln p(x) = F(x) / kT`` for ``p ~ exp(-E/kT)``."""
    return pot.forces(x) / tc.kT


def harmonic_gaussian(pot: ToyPotential, tc: TemperatureContext) -> MixtureModel:
    """Exact Boltzmann distribution of a tether-only harmonic potential.

    Each atom is Gaussian about the reference with ``Sigma_i = kT K_i^{-1}``.
    """
    if pot.kind != "harmonic" or pot.tether is None or pot.bonds:
        raise ValueError("needs a harmonic potential with tethers and no bonds")
    return MixtureModel(pot.reference[None], tc.kT * invert3(pot.tether)[None])


def finite_difference_gradient(fn, x, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function over every entry of ``x``."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[k] += h
        xm[k] -= h
        gf[k] = (fn(xp.reshape(x.shape)) - fn(xm.reshape(x.shape))) / (2 * h)
    return g
