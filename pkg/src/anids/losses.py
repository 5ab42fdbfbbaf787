"""Training objectives.

All functions work on plain arrays or tape variables.  Per-structure
variants return one value per molecule of a batch so the trainer can apply
the per-structure normalisations of the training procedures.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from . import noisegen
from .errors import EmptyMask, MissingLabels
from .noisegen import CovarianceSet, PerturbedMolecule

LOG_FIELDS = ("step", "anids", "kl", "gamma", "energy", "force", "total")


@dataclass
class LossBreakdown:
    anids: object = 0.0
    kl: object = 0.0
    gamma: object = 0.0
    energy: object = 0.0
    force: object = 0.0
    total: object = 0.0

    def values(self) -> "LossBreakdown":
        """Copy with every entry converted to a Python float."""
        return LossBreakdown(**{f.name: float(ad.value(getattr(self, f.name))) for f in fields(self)})

    def row(self, step: int) -> list:
        v = self.values()
        return [step] + [getattr(v, name) for name in LOG_FIELDS[1:]]


@dataclass(frozen=True)
class LossWeights:
    anids: float = 1.0
    kl: float = 1.0
    gamma: float = 1.0
    energy: float = 0.0
    force: float = 0.0


def combine(parts: LossBreakdown, w: LossWeights) -> LossBreakdown:
    """Fill ``total`` with the weighted sum of the components."""
    total = (w.anids * parts.anids + w.kl * parts.kl + w.gamma * parts.gamma
             + w.energy * parts.energy + w.force * parts.force)
    return LossBreakdown(parts.anids, parts.kl, parts.gamma, parts.energy, parts.force, total)


# -- denoising ------------------------------------------------------------------

def anids_target(cov: CovarianceSet, pert: PerturbedMolecule, route: str = "cholesky"):
    """Denoising target ``Sigma_i^{-1} (X~_i - X_i)``.

    ``route="cholesky"`` evaluates it as ``L_i^{-T} eps_i`` from the stored
    noise; ``route="inverse"`` applies the inverse covariance to the
    displacement.  The two agree to rounding.
    """
    if route == "cholesky":
        return noisegen.solve_upper_t(cov.chol, pert.eps)
    if route == "inverse":
        disp = pert.positions - pert.original.positions
        return noisegen.solve_upper_t(cov.chol, noisegen.solve_lower(cov.chol, disp))
    raise ValueError(f"unknown route {route!r}")


def squared_error(pred, target):
    return ad.sum_(ad.square(pred - target), axis=1)


def anids_loss(pert: PerturbedMolecule, cov: CovarianceSet, predictions, route: str = "cholesky"):
    """Mean over perturbed atoms of ``|phi_i - Sigma_i^{-1}(X~_i - X_i)|^2``."""
    mask = np.asarray(pert.mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("no atom is perturbed")
    err = squared_error(predictions, anids_target(cov, pert, route))
    return ad.sum_(err * mask.astype(float)) / float(mask.sum())


def masked_means(per_atom, mask: np.ndarray, mol_index: np.ndarray, n_mols: int):
    """Per-structure ``sum_i m_i x_i / max(1, sum_i m_i)``."""
    m = np.asarray(mask, dtype=float)
    counts = np.maximum(1.0, np.bincount(mol_index, weights=m, minlength=n_mols))
    return ad.segment_sum(per_atom * m, mol_index, n_mols) / counts


# -- regularizers -----------------------------------------------------------------

def kl_per_atom(cov: CovarianceSet, sigma_p: float):
    """``KL(N(0, Sigma_i) || N(0, sigma_p^2 I))`` for every atom (d = 3)."""
    s2 = sigma_p**2
    return 0.5 * (noisegen.trace(cov.sigma) * (1.0 / s2) - 3.0 + 3.0 * np.log(s2) - noisegen.logdet(cov.chol))


def kl_loss(cov: CovarianceSet, sigma_p: float, mask: np.ndarray | None = None):
    kl = kl_per_atom(cov, sigma_p)
    if mask is None:
        return ad.mean(kl)
    mask = np.asarray(mask, dtype=float)
    return ad.sum_(kl * mask) / max(1.0, float(mask.sum()))


def hinge_per_atom(big_gamma, kappa: float):
    return ad.square(ad.relu(kappa - big_gamma))


def gamma_hinge(big_gamma, kappa: float, mask: np.ndarray | None = None):
    """Mean of ``max(0, kappa - Gamma_i)^2``."""
    h = hinge_per_atom(big_gamma, kappa)
    if mask is None:
        return ad.mean(h)
    mask = np.asarray(mask, dtype=float)
    return ad.sum_(h * mask) / max(1.0, float(mask.sum()))


# -- supervised -----------------------------------------------------------------

def supervised_losses(mol, energy_pred, forces_pred, mask: np.ndarray | None = None):
    """``(|E - E^|, mean_{i unperturbed} |f_i - f^_i|^2)`` for one molecule.

    The force mean runs over atoms with ``mask == False`` and is 0 when every
    atom is perturbed.
    """
    if mol.energy is None or mol.forces is None:
        raise MissingLabels("molecule lacks energy or force labels")
    n = len(mol)
    keep = np.ones(n) if mask is None else 1.0 - np.asarray(mask, dtype=float)
    le = ad.abs_(energy_pred - mol.energy)
    lf = ad.sum_(squared_error(forces_pred, mol.forces) * keep) / max(1.0, float(keep.sum()))
    return le, lf


# -- special cases ----------------------------------------------------------------

def classical_denoise_loss(predictions, x_tilde, x, sigma) -> float:
    """Isotropic denoising loss ``mean_i |phi_i - (X~_i - X_i)/sigma_i^2|^2``.

    ``sigma`` is a scalar or one value per atom.
    """
    s2 = np.broadcast_to(np.asarray(sigma, dtype=float) ** 2, (len(np.asarray(x)),))
    t = (np.asarray(x_tilde) - np.asarray(x)) / s2[:, None]
    return float(np.mean(np.sum((np.asarray(predictions) - t) ** 2, axis=1)))


def weighted_denoise_loss(predictions, x_tilde, x, sigmas) -> float:
    """Per-atom weighted form ``mean_i sigma_i^2 |phi_i - (X~_i - X_i)/sigma_i^2|^2``."""
    s2 = np.asarray(sigmas, dtype=float) ** 2
    t = (np.asarray(x_tilde) - np.asarray(x)) / s2[:, None]
    return float(np.mean(s2 * np.sum((np.asarray(predictions) - t) ** 2, axis=1)))


def isotropic_covariance(sigmas, n_atoms: int) -> CovarianceSet:
    """``Sigma_i = sigma_i^2 I`` (no anisotropic correction)."""
    a = np.broadcast_to(np.asarray(sigmas, dtype=float) ** 2, (n_atoms,)).copy()
    empty = np.zeros(0, dtype=int)
    return noisegen.covariance_from_heads(a, None, None, empty, empty, np.zeros((0, 3)), n_atoms, "denoisevae")


def reduce_to_special_case(mode: str, mol, eps: np.ndarray, predictions, sigmas, sigma_p: float = 0.1):
    """Evaluate the denoising loss with a reduced covariance family.

    ``mode="dens"`` uses one constant ``sigma`` for all atoms and
    ``mode="denoisevae"`` one ``sigma_i`` per atom, both with no anisotropic
    correction.  Returns ``(breakdown, reference)`` where ``reference`` is the
    classical loss computed independently from displacements (with
    per-atom scales for ``denoisevae``).  The per-atom weighted form
    (:func:`weighted_denoise_loss`) differs by positive per-atom weights and
    shares only the minimiser, not the value.
    """
    if mode not in ("dens", "denoisevae"):
        raise ValueError(f"unknown special case {mode!r}")
    n = len(mol)
    sigmas = np.asarray(sigmas, dtype=float)
    if mode == "dens" and sigmas.size != 1:
        raise ValueError("dens mode takes a single sigma")
    cov = isotropic_covariance(sigmas, n)
    x_tilde, eps_used = noisegen.perturb(cov, mol.positions, eps)
    pert = PerturbedMolecule(mol, x_tilde, eps_used, np.ones(n, dtype=bool))
    parts = LossBreakdown(anids=anids_loss(pert, cov, predictions), kl=kl_loss(cov, sigma_p))
    parts = combine(parts, LossWeights(gamma=0.0)).values()
    ref = classical_denoise_loss(predictions, x_tilde, mol.positions, sigmas)
    return parts, ref
