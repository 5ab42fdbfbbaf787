"""Eigen-probe of learned covariances and the special-case reduction suite.

The probe decomposes every ``Sigma_i``, nudges atom ``i`` along each
eigenvector and measures how much a reference potential's energy moves.
Small noise along stiff directions shows up as a negative rank correlation
between eigenvalues and energy sensitivity.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import losses, noisegen
from .encoder import EncoderConfig, init_generator
from .linalg3 import eigh3
from .moldata import Molecule, ToyPotential, build_neighbors

PROBE_FORMAT = "anids-eigenprobe"

_num_or_null = {"type": ["number", "null"]}
_vec3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}

PROBE_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "delta", "n_magnitudes", "noise_mode", "atoms", "spearman",
                 "mean_bond_alignment"],
    "additionalProperties": False,
    "properties": {
        "format": {"const": PROBE_FORMAT},
        "version": {"const": 1},
        "delta": {"type": "number", "minimum": 0},
        "n_magnitudes": {"type": "integer", "minimum": 1},
        "noise_mode": {"enum": list(noisegen.MODES)},
        "spearman": _num_or_null,
        "mean_bond_alignment": _num_or_null,
        "atoms": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["index", "atomic_number", "eigenvalues", "eigenvectors", "smape", "inverse_smape",
                             "nearest_neighbor", "bond_alignment"],
                "additionalProperties": False,
                "properties": {
                    "index": {"type": "integer", "minimum": 0},
                    "atomic_number": {"type": "integer", "minimum": 1},
                    "eigenvalues": _vec3,
                    "eigenvectors": {"type": "array", "items": _vec3, "minItems": 3, "maxItems": 3},
                    "smape": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 2},
                              "minItems": 3, "maxItems": 3},
                    "inverse_smape": {"type": "array", "items": _num_or_null, "minItems": 3, "maxItems": 3},
                    "nearest_neighbor": {"type": ["integer", "null"]},
                    "bond_alignment": {"type": ["number", "null"], "minimum": -1, "maximum": 1},
                },
            },
        },
    },
}


def smape(e_ref, e_pert):
    """Symmetric absolute percentage error ``2|a - b| / (|a| + |b|)``; 0 when both are 0.

    Works elementwise on arrays.
    """
    a = np.asarray(e_ref, dtype=float)
    b = np.asarray(e_pert, dtype=float)
    den = np.abs(a) + np.abs(b)
    out = np.where(den > 0, 2.0 * np.abs(a - b) / np.where(den > 0, den, 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def snap(values: np.ndarray, rel: float = 1e-9) -> np.ndarray:
    """Round onto a grid of ``rel * max|values|`` so values equal up to rounding tie exactly."""
    values = np.asarray(values, dtype=float)
    scale = float(np.max(np.abs(values))) if values.size else 0.0
    if scale == 0.0:
        return values.copy()
    step = rel * scale
    return np.round(values / step) * step


@dataclass
class AtomProbe:
    index: int
    atomic_number: int
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # rows are eigenvectors
    smape: np.ndarray
    nearest_neighbor: int | None
    bond_alignment: float | None


@dataclass
class EigenProbeReport:
    delta: float
    n_magnitudes: int
    noise_mode: str
    atoms: list = field(default_factory=list)

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        w = np.concatenate([a.eigenvalues for a in self.atoms]) if self.atoms else np.zeros(0)
        s = np.concatenate([a.smape for a in self.atoms]) if self.atoms else np.zeros(0)
        return w, s

    def spearman(self) -> float | None:
        """Rank correlation of eigenvalue with sMAPE over all (atom, direction) pairs.

        Eigenvalues are snapped first so degenerate directions tie.
        """
        w, s = self.pooled()
        if len(w) < 2 or np.ptp(snap(w)) == 0 or np.ptp(s) == 0:
            return None
        rho = spearmanr(snap(w), s).statistic
        return None if not np.isfinite(rho) else float(rho)

    def mean_bond_alignment(self) -> float | None:
        vals = [a.bond_alignment for a in self.atoms if a.bond_alignment is not None]
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        def inv(s):
            return [None if v == 0 else 1.0 / float(v) for v in s]

        return {
            "format": PROBE_FORMAT,
            "version": 1,
            "delta": float(self.delta),
            "n_magnitudes": int(self.n_magnitudes),
            "noise_mode": self.noise_mode,
            "spearman": self.spearman(),
            "mean_bond_alignment": self.mean_bond_alignment(),
            "atoms": [
                {
                    "index": a.index,
                    "atomic_number": a.atomic_number,
                    "eigenvalues": [float(v) for v in a.eigenvalues],
                    "eigenvectors": [[float(c) for c in row] for row in a.eigenvectors],
                    "smape": [float(v) for v in a.smape],
                    "inverse_smape": inv(a.smape),
                    "nearest_neighbor": a.nearest_neighbor,
                    "bond_alignment": a.bond_alignment,
                }
                for a in self.atoms
            ],
        }

    def write(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        if csv_path is None:
            return
        with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["atom", "direction", "eigenvalue", "smape", "inverse_smape", "vx", "vy", "vz",
                        "bond_alignment"])
            for a in self.atoms:
                for k in range(3):
                    s = float(a.smape[k])
                    w.writerow([a.index, k, repr(float(a.eigenvalues[k])), repr(s), "" if s == 0 else repr(1.0 / s),
                                *(repr(float(c)) for c in a.eigenvectors[k]),
                                "" if a.bond_alignment is None else repr(a.bond_alignment)])


def direction_smape(pot: ToyPotential, positions: np.ndarray, atom: int, direction: np.ndarray,
                    magnitudes: np.ndarray) -> float:
    """Mean sMAPE of the energy over ``+/-`` displacements of one atom."""
    e0 = pot.energy(positions)
    vals = []
    for mag in magnitudes:
        for sign in (1.0, -1.0):
            x = positions.copy()
            x[atom] += sign * mag * direction
            vals.append(smape(e0, pot.energy(x)))
    return float(np.mean(vals))


def probe_covariances(sigma: np.ndarray, mol: Molecule, pot: ToyPotential, delta: float = 0.05,
                      n_magnitudes: int = 8, seed: int = 0, noise_mode: str = "anids") -> EigenProbeReport:
    """Probe precomputed per-atom covariances ``sigma`` of shape ``(N, 3, 3)``."""
    sigma = np.asarray(sigma, dtype=float)
    x = np.asarray(mol.positions, dtype=float)
    n = len(mol)
    rng = np.random.default_rng(seed)
    report = EigenProbeReport(delta, n_magnitudes, noise_mode)
    for i in range(n):
        w, v = eigh3(sigma[i])
        mags = rng.uniform(0.0, delta, n_magnitudes)
        s = np.array([direction_smape(pot, x, i, v[:, k], mags) for k in range(3)])
        nn, align = None, None
        if n > 1:
            d = np.linalg.norm(x - x[i], axis=1)
            d[i] = np.inf
            nn = int(np.argmin(d))
            u = (x[i] - x[nn]) / d[nn]
            align = float(min(1.0, abs(float(v[:, 0] @ u))))
        report.atoms.append(AtomProbe(i, int(mol.atomic_numbers[i]), w, v.T.copy(), s, nn, align))
    return report


def probe(params: dict, cfg: EncoderConfig, mol: Molecule, pot: ToyPotential, delta: float = 0.05,
          n_magnitudes: int = 8, seed: int = 0, noise_mode: str = "anids", sigma_p: float = 0.1) -> EigenProbeReport:
    """Eigen-probe of the generator's covariances on ``mol`` against ``pot``."""
    cov = noisegen.molecule_covariance(mol, params, cfg, noise_mode, sigma_p)
    return probe_covariances(cov.sigma, mol, pot, delta, n_magnitudes, seed, noise_mode)


# -- special-case reductions ---------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    value: float
    tolerance: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.value:.3e} (tol {self.tolerance:g})"


def _random_molecule(rng, n: int) -> Molecule:
    while True:
        x = rng.uniform(-2.0, 2.0, (n, 3))
        d = np.linalg.norm(x[:, None] - x[None], axis=-1) + np.eye(n) * 9
        if d.min() > 0.7:
            return Molecule(rng.integers(1, 10, n), x)


def reduce_check(seed: int = 0, n_cases: int = 20) -> list[Check]:
    """Check that the general loss collapses onto fixed-scale and per-atom-scale denoising.

    Each check reports the worst deviation over ``n_cases`` random molecules.
    """
    rng = np.random.default_rng(seed)
    worst = {k: 0.0 for k in ("dens_target", "dens_loss", "vae_target", "vae_loss", "vae_argmin",
                              "gamma_limit", "mode_dens", "mode_vae")}
    cfg = EncoderConfig(hidden=8, n_rbf=6, cutoff=3.0, max_z=10, n_force=2)
    for case in range(n_cases):
        n = int(rng.integers(2, 7))
        mol = _random_molecule(rng, n)
        eps = rng.standard_normal((n, 3))
        pred = rng.standard_normal((n, 3)) * 10
        sigma = float(rng.uniform(0.05, 0.5))

        # fixed scale: Sigma = sigma^2 I
        cov = losses.isotropic_covariance(sigma, n)
        xt, e = noisegen.perturb(cov, mol.positions, eps)
        target = noisegen.solve_upper_t(cov.chol, e)
        classical = (xt - mol.positions) / sigma**2
        worst["dens_target"] = max(worst["dens_target"], _rel(target, classical))
        parts, ref = losses.reduce_to_special_case("dens", mol, eps, pred, sigma)
        worst["dens_loss"] = max(worst["dens_loss"], _rel(parts.anids, ref))

        # per-atom scale: Sigma_i = sigma_i^2 I
        sig = rng.uniform(0.05, 0.5, n)
        cov = losses.isotropic_covariance(sig, n)
        xt, e = noisegen.perturb(cov, mol.positions, eps)
        target = noisegen.solve_upper_t(cov.chol, e)
        worst["vae_target"] = max(worst["vae_target"], _rel(target, (xt - mol.positions) / sig[:, None] ** 2))
        parts, ref = losses.reduce_to_special_case("denoisevae", mol, eps, pred, sig)
        worst["vae_loss"] = max(worst["vae_loss"], _rel(parts.anids, ref))
        # both weightings vanish at the same prediction and are positive elsewhere
        at_opt = losses.weighted_denoise_loss(target, xt, mol.positions, sig)
        off_opt = losses.weighted_denoise_loss(target + 1e-3, xt, mol.positions, sig)
        worst["vae_argmin"] = max(worst["vae_argmin"], at_opt, 0.0 if off_opt > 0 else 1.0)

        # anisotropic weights -> 0 recovers the isotropic loss
        a = sig**2
        nl = build_neighbors(mol, 10.0)
        b = np.full(len(nl.center), -60.0)
        aniso = noisegen.covariance_from_heads(a, b, np.zeros(n), nl.center, nl.neighbor, nl.vectors
                                               / nl.distances[:, None], n, "anids")
        xt_a, e_a = noisegen.perturb(aniso, mol.positions, eps)
        pert = noisegen.PerturbedMolecule(mol, xt_a, e_a, np.ones(n, dtype=bool))
        worst["gamma_limit"] = max(worst["gamma_limit"], _rel(losses.anids_loss(pert, aniso, pred), ref))

        # mode switches of the generator
        params = init_generator(np.random.default_rng([seed, case]), cfg)
        dens = noisegen.molecule_covariance(mol, params, cfg, "dens", sigma)
        worst["mode_dens"] = max(worst["mode_dens"], float(np.max(np.abs(dens.sigma - sigma**2 * np.eye(3)))))
        vae = noisegen.molecule_covariance(mol, params, cfg, "denoisevae")
        iso = vae.a[:, None, None] * np.eye(3)
        worst["mode_vae"] = max(worst["mode_vae"], float(np.max(np.abs(vae.sigma - iso))))

    tol = 1e-10
    return [Check(name, worst[name] <= tol, worst[name], tol) for name in worst]


def _rel(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))
