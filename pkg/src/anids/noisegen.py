"""Structure-aware anisotropic covariances and perturbation sampling.

Each atom gets ``Sigma_i = a_i (I - sum_j gamma_ij u_ij u_ij^T)`` where
``u_ij`` is the unit vector from neighbor ``j`` to atom ``i`` and the weights

    gamma_ij = exp(b_ij) / (sum_l exp(b_il) + c_i)

sum to ``Gamma_i < 1``.  Every eigenvalue of ``Sigma_i`` is therefore at
least ``a_i (1 - Gamma_i) > 0``.  The functions accept plain arrays or tape
variables (see :mod:`anids.autodiff`), so the same code builds covariances
for training and for forward-only analysis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoder
from .encoder import EncoderConfig
from .errors import NotPositiveDefinite
from .linalg3 import PD_TOL
from .moldata import Molecule, build_neighbors

MODES = ("anids", "denoisevae", "dens")


@dataclass
class CovarianceSet:
    """Per-atom covariance data; array fields may be tape variables."""

    sigma: object  # (N, 3, 3)
    chol: object  # (N, 3, 3) lower-triangular
    a: object  # (N,)
    gamma: object  # (E,)
    big_gamma: object  # (N,)  anisotropic mass
    center: np.ndarray
    neighbor: np.ndarray
    unit: np.ndarray  # (E, 3)

    @property
    def n_atoms(self) -> int:
        return ad.value(self.sigma).shape[0]


@dataclass
class PerturbedMolecule:
    original: Molecule
    positions: object  # (N, 3) perturbed coordinates, array or Var
    eps: np.ndarray  # (N, 3) standard normals (zero rows where the mask is off)
    mask: np.ndarray  # (N,) bool, True where the atom was perturbed


def anisotropic_weights(b, center: np.ndarray, n_atoms: int, c=None, log_c=None):
    """Normalized weights ``gamma_ij`` per edge and their per-center sum ``Gamma_i``.

    Pass the regulator either as ``c`` (positive) or ``log_c``.  Logits are
    shifted by ``max(max_j b_ij, log c_i)`` before exponentiation; the shift
    cancels exactly and is treated as a constant.
    """
    if log_c is None:
        if c is None:
            raise TypeError("pass c or log_c")
        log_c = ad.log(c)
    b_val = np.asarray(ad.value(b), dtype=float).reshape(-1)
    shift = np.array(ad.value(log_c), dtype=float).reshape(-1).copy()
    if len(b_val):
        np.maximum.at(shift, center, b_val)
    eb = ad.exp(b - shift[center]) if len(b_val) else np.zeros(0)
    ec = ad.exp(log_c - shift)
    denom = ad.segment_sum(eb, center, n_atoms) + ec
    gamma = eb / ad.getitem(denom, center) if len(b_val) else np.zeros(0)
    big_gamma = ad.segment_sum(gamma, center, n_atoms) if len(b_val) else np.zeros(n_atoms)
    return gamma, big_gamma


def build_covariance(a, gamma, unit, center: np.ndarray, n_atoms: int):
    """``Sigma_i = a_i (I - sum_j gamma_ij u_ij u_ij^T)`` for every atom, shape ``(N, 3, 3)``."""
    eye = np.eye(3)
    if len(center):
        uu = ad.reshape(unit, (-1, 3, 1)) * ad.reshape(unit, (-1, 1, 3))
        corr = ad.segment_sum(ad.reshape(gamma, (-1, 1, 1)) * uu, center, n_atoms)
        inner = eye - corr
    else:
        inner = np.broadcast_to(eye, (n_atoms, 3, 3)).copy()
    return ad.reshape(a, (-1, 1, 1)) * inner


def cholesky(sigma, tol: float = PD_TOL):
    """Batched differentiable 3x3 Cholesky factor, shape ``(N, 3, 3)``."""

    def entry(i, j):
        return ad.getitem(sigma, (slice(None), i, j))

    def pivot(p):
        if not np.all(ad.value(p) > tol):
            raise NotPositiveDefinite(f"Cholesky pivot {np.min(ad.value(p)):.3e} <= {tol:g}")
        return ad.sqrt(p)

    l00 = pivot(entry(0, 0))
    l10 = entry(1, 0) / l00
    l20 = entry(2, 0) / l00
    l11 = pivot(entry(1, 1) - ad.square(l10))
    l21 = (entry(2, 1) - l20 * l10) / l11
    l22 = pivot(entry(2, 2) - ad.square(l20) - ad.square(l21))
    zero = np.zeros(ad.value(l00).shape)
    rows = [ad.stack([l00, zero, zero], axis=1), ad.stack([l10, l11, zero], axis=1), ad.stack([l20, l21, l22], axis=1)]
    return ad.stack(rows, axis=1)


def lower_apply(chol, eps):
    """``L_i eps_i`` for every atom."""
    return ad.sum_(chol * ad.reshape(eps, (-1, 1, 3)), axis=2)


def solve_upper_t(chol, v):
    """``L_i^{-T} v_i`` by back substitution."""

    def el(i, j):
        return ad.getitem(chol, (slice(None), i, j))

    def vi(i):
        return ad.getitem(v, (slice(None), i))

    x2 = vi(2) / el(2, 2)
    x1 = (vi(1) - el(2, 1) * x2) / el(1, 1)
    x0 = (vi(0) - el(1, 0) * x1 - el(2, 0) * x2) / el(0, 0)
    return ad.stack([x0, x1, x2], axis=1)


def solve_lower(chol, v):
    """``L_i^{-1} v_i`` by forward substitution."""

    def el(i, j):
        return ad.getitem(chol, (slice(None), i, j))

    def vi(i):
        return ad.getitem(v, (slice(None), i))

    x0 = vi(0) / el(0, 0)
    x1 = (vi(1) - el(1, 0) * x0) / el(1, 1)
    x2 = (vi(2) - el(2, 0) * x0 - el(2, 1) * x1) / el(2, 2)
    return ad.stack([x0, x1, x2], axis=1)


def logdet(chol):
    """``ln |Sigma_i| = 2 sum_k ln L_kk`` per atom."""
    diag = ad.stack([ad.getitem(chol, (slice(None), k, k)) for k in range(3)], axis=1)
    return 2.0 * ad.sum_(ad.log(diag), axis=1)


def trace(sigma):
    return sum(ad.getitem(sigma, (slice(None), k, k)) for k in range(3))


def covariance_from_heads(a, b, log_c, center, neighbor, unit, n_atoms: int, mode: str = "anids",
                          dens_sigma: float = 0.1) -> CovarianceSet:
    """Assemble a :class:`CovarianceSet` from head outputs.

    ``denoisevae`` drops the anisotropic correction (``Sigma_i = a_i I``) and
    ``dens`` additionally fixes ``a_i = dens_sigma^2``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown noise mode {mode!r}")
    if mode == "anids":
        gamma, big_gamma = anisotropic_weights(b, center, n_atoms, log_c=log_c)
    else:
        gamma, big_gamma = np.zeros(len(center)), np.zeros(n_atoms)
        if mode == "dens":
            a = np.full(n_atoms, dens_sigma**2)
    sigma = build_covariance(a, gamma, unit, center, n_atoms)
    return CovarianceSet(sigma, cholesky(sigma), a, gamma, big_gamma, center, neighbor, ad.value(unit))


def generate_covariance(params, cfg: EncoderConfig, species: np.ndarray, positions: np.ndarray,
                        center: np.ndarray, neighbor: np.ndarray, mode: str = "anids",
                        dens_sigma: float = 0.1) -> CovarianceSet:
    """Run the generator network on clean coordinates and build every ``Sigma_i``."""
    n = len(species)
    _, dist, unit = encoder.edge_geometry(positions, center, neighbor)
    if mode == "dens":
        return covariance_from_heads(None, None, None, center, neighbor, unit, n, mode, dens_sigma)
    h = encoder.encode(params, "gen", cfg, species, center, neighbor, dist)
    a, b, log_c = encoder.heads(params, h, center, neighbor, dist, cfg)
    return covariance_from_heads(a, b, log_c, center, neighbor, unit, n, mode, dens_sigma)


def molecule_covariance(mol: Molecule, params, cfg: EncoderConfig, mode: str = "anids",
                        dens_sigma: float = 0.1) -> CovarianceSet:
    nl = build_neighbors(mol, cfg.cutoff)
    return generate_covariance(params, cfg, mol.atomic_numbers, mol.positions, nl.center, nl.neighbor,
                               mode, dens_sigma)


def atom_normals(key, n_atoms: int) -> np.ndarray:
    """Standard normals with an independent stream per atom keyed by ``(*key, atom)``.

    Results do not depend on evaluation order, so atoms can be processed in
    any order or in parallel.
    """
    key = [int(k) for k in np.atleast_1d(key)]
    return np.stack([np.random.default_rng(key + [i]).standard_normal(3) for i in range(n_atoms)]) \
        if n_atoms else np.zeros((0, 3))


def perturb(cov: CovarianceSet, positions, eps: np.ndarray, mask: np.ndarray | None = None):
    """``X~_i = X_i + m_i L_i eps_i``; returns ``(X~, eps_masked)``."""
    n = cov.n_atoms
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    eps = np.where(mask[:, None], np.asarray(eps, dtype=float), 0.0)
    return positions + lower_apply(cov.chol, eps), eps


def sample_perturbation(mol: Molecule, cov: CovarianceSet, mask=None, seed: int = 0, frame: int = 0) -> PerturbedMolecule:
    eps = atom_normals((seed, frame), len(mol))
    pos, eps = perturb(cov, mol.positions, eps, mask)
    mask = np.ones(len(mol), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return PerturbedMolecule(mol, pos, eps, mask)


def equivariance_probe(mol: Molecule, params, cfg: EncoderConfig, rotation: np.ndarray,
                       translation: np.ndarray, mode: str = "anids") -> float:
    """``max_i |Sigma_i(R X + t) - R Sigma_i(X) R^T|_inf``."""
    rot = np.asarray(rotation, dtype=float)
    base = molecule_covariance(mol, params, cfg, mode).sigma
    moved = mol.with_positions(mol.positions @ rot.T + np.asarray(translation, dtype=float))
    sig = molecule_covariance(moved, params, cfg, mode).sigma
    expect = rot @ base @ rot.T
    return float(np.max(np.abs(sig - expect))) if len(mol) else 0.0
