"""Invariant message-passing encoder, covariance heads and vector readouts.

Parameters live in a flat ``dict[str, ndarray]`` keyed by dotted names.  All
functions accept either plain arrays or :class:`~anids.autodiff.Var` values
for parameters and positions (see :mod:`anids.autodiff`).

Only interatomic distances and force projections enter the network, so
embeddings and scalar heads are invariant under rigid motions.  Vector
readouts are invariant scalars times unit edge vectors, which makes them
rotation-equivariant.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatch
from .moldata import Molecule, NeighborList


@dataclass(frozen=True)
class EncoderConfig:
    hidden: int = 64
    n_rbf: int = 16
    n_layers: int = 2
    cutoff: float = 3.0
    max_z: int = 86
    n_force: int = 8  # width of the force-encoding edge features (0 disables)

    @property
    def rbf_centers(self) -> np.ndarray:
        return np.linspace(0.0, self.cutoff, self.n_rbf)

    @property
    def rbf_width(self) -> float:
        return self.cutoff / (self.n_rbf - 1)

    def to_dict(self):
        return asdict(self)


# -- elementary pieces ----------------------------------------------------------

def rbf(distance, cfg: EncoderConfig):
    """Gaussian radial basis ``exp(-((d - mu_k) / width)^2)`` for each center."""
    d = ad.reshape(distance, (-1, 1)) if ad.is_var(distance) else np.reshape(np.asarray(distance, float), (-1, 1))
    z = (d - cfg.rbf_centers[None, :]) * (1.0 / cfg.rbf_width)
    return ad.exp(-ad.square(z))


def envelope(distance, cutoff: float):
    """Smooth cutoff ``(1 - (d/rc)^2)^2``; zero with zero slope at the cutoff."""
    u = 1.0 - ad.square(distance) * (1.0 / cutoff**2)
    return ad.square(u)


def force_edge_feature(f_i, r_ij):
    """Raw force-encoding scalar ``(f_i . r_ij/|r_ij|) |r_ij|`` per edge."""
    f_i = np.asarray(f_i, dtype=float)
    r_ij = np.asarray(r_ij, dtype=float)
    dist = np.linalg.norm(r_ij, axis=-1)
    if np.any(dist <= 0):
        raise ValueError("edge vector must be non-zero")
    return np.sum(f_i * r_ij, axis=-1) / dist * dist


def edge_geometry(positions, center: np.ndarray, neighbor: np.ndarray):
    """Return ``(vectors, distances, unit_vectors)`` for ``r_ij = X_i - X_j``."""
    vec = ad.getitem(positions, center) - ad.getitem(positions, neighbor)
    dist = ad.sqrt(ad.sum_(ad.square(vec), axis=1))
    unit = vec / ad.reshape(dist, (-1, 1))
    return vec, dist, unit


def _linear(params, name, x):
    return ad.matmul(x, params[name + ".W"]) + params[name + ".b"]


def mlp(params, name, x):
    """``Linear -> tanh -> Linear`` block named ``{name}.0`` / ``{name}.1``."""
    return _linear(params, name + ".1", ad.tanh(_linear(params, name + ".0", x)))


# -- parameters -----------------------------------------------------------------

def _uniform_linear(rng, n_in, n_out):
    bound = 1.0 / np.sqrt(n_in)
    return rng.uniform(-bound, bound, (n_in, n_out)), rng.uniform(-bound, bound, n_out)


def _add_mlp(params, rng, name, n_in, n_hidden, n_out):
    for k, (a, b) in enumerate(((n_in, n_hidden), (n_hidden, n_out))):
        w, bias = _uniform_linear(rng, a, b)
        params[f"{name}.{k}.W"] = w
        params[f"{name}.{k}.b"] = bias


def init_encoder(params: dict, rng: np.random.Generator, prefix: str, cfg: EncoderConfig, force_features: bool):
    d = cfg.hidden
    params[f"{prefix}.embed"] = rng.uniform(-1.0, 1.0, (cfg.max_z + 1, d))
    n_edge = cfg.n_rbf + (cfg.n_force if force_features else 0)
    if force_features and cfg.n_force:
        params[f"{prefix}.force_proj"] = rng.uniform(-1.0, 1.0, (1, cfg.n_force))
    for layer in range(cfg.n_layers):
        _add_mlp(params, rng, f"{prefix}.msg{layer}", 2 * d + n_edge, d, d)
        _add_mlp(params, rng, f"{prefix}.upd{layer}", 2 * d, d, d)


def init_generator(rng: np.random.Generator, cfg: EncoderConfig, sigma_p: float = 0.1) -> dict:
    """Encoder plus the three covariance heads, prefixed ``gen.``.

    The isotropic head starts at ``a_i ~ sigma_p^2`` so the first perturbations
    have the prior's scale.
    """
    params: dict[str, np.ndarray] = {}
    init_encoder(params, rng, "gen", cfg, force_features=False)
    d = cfg.hidden
    _add_mlp(params, rng, "gen.iso", d, d, 1)
    _add_mlp(params, rng, "gen.aniso", 2 * d + cfg.n_rbf, d, 1)
    _add_mlp(params, rng, "gen.reg", d, d, 1)
    params["gen.iso.1.b"] = params["gen.iso.1.b"] + 2.0 * np.log(sigma_p)
    return params


def init_denoiser(rng: np.random.Generator, cfg: EncoderConfig, energy_per_atom: float = 0.0) -> dict:
    """Encoder with force encoding plus noise, force and energy readouts (``den.``)."""
    params: dict[str, np.ndarray] = {}
    init_encoder(params, rng, "den", cfg, force_features=True)
    d = cfg.hidden
    _add_mlp(params, rng, "den.noise", 2 * d + cfg.n_rbf, d, 1)
    _add_mlp(params, rng, "den.force", 2 * d + cfg.n_rbf, d, 1)
    _add_mlp(params, rng, "den.energy", d, d, 1)
    params["den.energy.1.b"] = params["den.energy.1.b"] + energy_per_atom
    return params


def count_parameters(params: dict) -> int:
    return int(sum(np.size(v) for v in params.values()))


# -- forward passes -------------------------------------------------------------

def encode(params, prefix: str, cfg: EncoderConfig, species: np.ndarray, center: np.ndarray,
           neighbor: np.ndarray, dist, force_proj=None):
    """Per-atom embeddings ``h`` of shape ``(N, hidden)``.

    ``force_proj`` holds the per-edge raw force feature ``f_i . r_ij`` (or
    ``None``); it enters through a bias-free linear map so a zero force is
    indistinguishable from no force encoding.
    """
    emb = params[f"{prefix}.embed"]
    if ad.value(emb).shape[1] != cfg.hidden:
        raise DimensionMismatch(f"embedding width {ad.value(emb).shape[1]} != hidden {cfg.hidden}")
    if np.any(species > cfg.max_z):
        raise DimensionMismatch(f"atomic number above max_z={cfg.max_z}")
    n = len(species)
    h = ad.getitem(emb, species)
    edge = rbf(dist, cfg)
    wf = params.get(f"{prefix}.force_proj")
    if wf is not None:
        if force_proj is None:
            feat = np.zeros((len(center), ad.value(wf).shape[1]))
        else:
            feat = ad.matmul(ad.reshape(force_proj, (-1, 1)), wf)
        edge = ad.concat([edge, feat], axis=1)
    env = ad.reshape(envelope(dist, cfg.cutoff), (-1, 1))
    for layer in range(cfg.n_layers):
        msg_in = ad.concat([ad.getitem(h, center), ad.getitem(h, neighbor), edge], axis=1)
        msg = mlp(params, f"{prefix}.msg{layer}", msg_in) * env
        agg = ad.segment_sum(msg, center, n)
        h = h + mlp(params, f"{prefix}.upd{layer}", ad.concat([h, agg], axis=1))
    return h


def pair_input(h, center, neighbor, dist, cfg: EncoderConfig):
    """``[h_i ; h_j ; rbf(|r_ij|)]`` per edge."""
    return ad.concat([ad.getitem(h, center), ad.getitem(h, neighbor), rbf(dist, cfg)], axis=1)


def heads(params, h, center, neighbor, dist, cfg: EncoderConfig):
    """Covariance heads ``(a_i, b_ij, log c_i)``.

    ``a_i = exp(w0(h_i))`` and ``c_i = exp(w2(h_i))``; the log of ``c`` is
    returned because the normalized weights only need ``log c_i``.
    """
    a = ad.exp(ad.reshape(mlp(params, "gen.iso", h), (-1,)))
    b = ad.reshape(mlp(params, "gen.aniso", pair_input(h, center, neighbor, dist, cfg)), (-1,))
    log_c = ad.reshape(mlp(params, "gen.reg", h), (-1,))
    return a, b, log_c


def vector_readout(params, name, h, center, neighbor, dist, unit, n_atoms, cfg: EncoderConfig):
    """``out_i = sum_j s(h_i, h_j, rbf) * env(r_ij) * r_ij/|r_ij|``."""
    s = mlp(params, name, pair_input(h, center, neighbor, dist, cfg))
    s = s * ad.reshape(envelope(dist, cfg.cutoff), (-1, 1))
    return ad.segment_sum(s * unit, center, n_atoms)


def energy_readout(params, h, mol_index: np.ndarray, n_mols: int):
    per_atom = ad.reshape(mlp(params, "den.energy", h), (-1,))
    return ad.segment_sum(per_atom, mol_index, n_mols)


def embed(mol: Molecule, neighbors: NeighborList, params, cfg: EncoderConfig, prefix: str = "gen",
          forces: np.ndarray | None = None):
    """Embeddings of one molecule with a prebuilt neighbor list.

    When ``forces`` are given (denoiser only) they are encoded on every edge.
    """
    _, dist, _ = edge_geometry(mol.positions, neighbors.center, neighbors.neighbor)
    proj = None
    if forces is not None:
        proj = force_edge_feature(np.asarray(forces)[neighbors.center], neighbors.vectors)
    return encode(params, prefix, cfg, mol.atomic_numbers, neighbors.center, neighbors.neighbor, dist, proj)


# -- checkpoint of named tensors ----------------------------------------------

def tensors_to_json(tensors: dict) -> dict:
    return {k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=float).ravel().tolist()}
            for k, v in sorted(tensors.items())}


def tensors_from_json(blob: dict) -> dict:
    return {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in blob.items()}


def save_params(path, params: dict, cfg: EncoderConfig | None = None) -> None:
    """Write named tensors as JSON: ``{"config": ..., "tensors": {name: {shape, data}}}``."""
    blob = {"format": "anids-params", "version": 1, "config": None if cfg is None else cfg.to_dict(),
            "tensors": tensors_to_json(params)}
    Path(path).write_text(json.dumps(blob), encoding="utf-8")


def load_params(path) -> tuple[dict, EncoderConfig | None]:
    blob = json.loads(Path(path).read_text(encoding="utf-8"))
    cfg = None if blob.get("config") is None else EncoderConfig(**blob["config"])
    return tensors_from_json(blob["tensors"]), cfg
