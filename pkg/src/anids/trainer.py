"""AdamW optimizer, pretraining and supervised training with partial corruption.

One training step flattens a batch of molecules into a single graph and
records the whole forward pass on one tape.  All randomness of a step (batch
choice, corruption decisions, masks, noise) is drawn from generators keyed
by ``(seed, step, ...)``, so a run is replayable from any checkpoint.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import encoder, noisegen
from .encoder import EncoderConfig
from .errors import NonFiniteGradient
from .losses import LOG_FIELDS, LossBreakdown, hinge_per_atom, kl_per_atom, masked_means, squared_error
from .moldata import Batch, batch_edges, make_batch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "anids-checkpoint"


@dataclass(frozen=True)
class TrainConfig:
    # loss weights
    lambda_anids: float = 1.0
    lambda_kl: float = 1.0
    lambda_gamma: float = 1.0
    lambda_energy: float = 1.0
    lambda_force: float = 80.0
    # noise model
    sigma_p: float = 0.1
    kappa: float = 0.5
    p_anids: float = 0.25
    r_anids: float = 0.25
    noise_mode: str = "anids"
    freeze_generator: bool = False
    # optimizer
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 8
    steps: int = 1000
    seed: int = 0
    # encoder
    hidden: int = 64
    n_rbf: int = 16
    n_layers: int = 2
    cutoff: float = 3.0
    max_z: int = 86
    n_force: int = 8

    def __post_init__(self):
        for name in ("lambda_anids", "lambda_kl", "lambda_gamma", "lambda_energy", "lambda_force", "weight_decay"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.sigma_p > 0:
            raise ValueError("sigma_p must be positive")
        if not 0 < self.kappa < 1:
            raise ValueError("kappa must lie in (0, 1)")
        for name in ("p_anids", "r_anids"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.noise_mode not in noisegen.MODES:
            raise ValueError(f"noise_mode must be one of {noisegen.MODES}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.hidden, self.n_rbf, self.n_layers, self.cutoff, self.max_z, self.n_force)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown training option(s): {', '.join(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **changes})

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- optimizer --------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(state: AdamState, params: dict, grads: dict) -> dict:
    """AdamW update of the entries of ``params`` that appear in ``grads``.

    Weight decay is decoupled (applied to the parameter, not the gradient).
    Raises :class:`NonFiniteGradient` before touching any state if a
    gradient contains NaN or inf.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {k}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = dict(params)
    for k, g in grads.items():
        m = b1 * state.m.get(k, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(k, 0.0) + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        p = params[k] * (1.0 - state.lr * state.weight_decay)
        out[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# -- random draws -------------------------------------------------------------------

@dataclass
class NoiseDraws:
    """Everything random about one step's corruption."""

    corrupt: np.ndarray  # (B,) bool, structure takes the noisy branch
    mask: np.ndarray  # (N,) bool, atom is perturbed
    eps: np.ndarray  # (N, 3) standard normals


def draw_noise(cfg: TrainConfig, batch: Batch, step: int, pretrain: bool) -> NoiseDraws:
    """Per-structure branch decision, atom mask and noise keyed by ``(seed, step, j)``.

    Pretraining perturbs every atom.  Supervised training takes the noisy
    branch with probability ``p_anids`` and then perturbs each atom with
    probability ``r_anids``.
    """
    corrupt = np.zeros(batch.n_mols, dtype=bool)
    masks, eps = [], []
    for j, mol in enumerate(batch.molecules):
        n = len(mol)
        if pretrain:
            corrupt[j] = True
            m = np.ones(n, dtype=bool)
        else:
            rng = np.random.default_rng([cfg.seed, step, j, 1])
            corrupt[j] = rng.random() < cfg.p_anids
            q = rng.random(n)
            m = (q < cfg.r_anids) & corrupt[j]
        masks.append(m)
        eps.append(noisegen.atom_normals((cfg.seed, step, j, 2), n))
    return NoiseDraws(corrupt, np.concatenate(masks), np.concatenate(eps))


def batch_indices(cfg: TrainConfig, n_train: int, step: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, step, 0])
    return rng.choice(n_train, size=cfg.batch_size, replace=n_train < cfg.batch_size)


# -- losses of one batch --------------------------------------------------------------

def batch_losses(cfg: TrainConfig, params: dict, batch: Batch, draws: NoiseDraws, supervised: bool) -> LossBreakdown:
    """Weighted losses of a batch for given parameters and pre-drawn noise.

    Parameters may be arrays or tape variables.  Each term is averaged per
    structure first (masked atoms for the denoising and regularizer terms,
    unmasked atoms for the force term, with a ``max(1, count)`` guard) and
    then over the batch.
    """
    enc = cfg.encoder
    x = batch.positions
    n, nb = batch.n_atoms, batch.n_mols
    mask = draws.mask
    mol = batch.mol_index
    zero = np.zeros(nb)
    anids = kl = gamma = energy = force = zero

    noisy = bool(mask.any())
    if noisy:
        gc, gn = batch_edges(x, batch.offsets, enc.cutoff)
        cov = noisegen.generate_covariance(params, enc, batch.species, x, gc, gn, cfg.noise_mode, cfg.sigma_p)
        x_t, eps = noisegen.perturb(cov, x, draws.eps, mask)
        kl = masked_means(kl_per_atom(cov, cfg.sigma_p), mask, mol, nb)
        if cfg.noise_mode == "anids":
            gamma = masked_means(hinge_per_atom(cov.big_gamma, cfg.kappa), mask, mol, nb)
    else:
        x_t = x

    dc, dn = batch_edges(ad.value(x_t), batch.offsets, enc.cutoff)
    vec, dist, unit = encoder.edge_geometry(x_t, dc, dn)
    proj = None
    if supervised:
        f_enc = batch.forces() * mask[:, None]
        proj = ad.dot3(f_enc[dc], vec)
    h = encoder.encode(params, "den", enc, batch.species, dc, dn, dist, proj)

    if noisy:
        phi = encoder.vector_readout(params, "den.noise", h, dc, dn, dist, unit, n, enc)
        target = noisegen.solve_upper_t(cov.chol, eps)
        anids = masked_means(squared_error(phi, target), mask, mol, nb)
    if supervised:
        e_hat = encoder.energy_readout(params, h, mol, nb)
        f_hat = encoder.vector_readout(params, "den.force", h, dc, dn, dist, unit, n, enc)
        energy = ad.abs_(e_hat - batch.energies())
        force = masked_means(squared_error(f_hat, batch.forces()), ~mask, mol, nb)

    parts = [ad.mean(t) for t in (anids, kl, gamma, energy, force)]
    lam = (cfg.lambda_anids, cfg.lambda_kl, cfg.lambda_gamma,
           cfg.lambda_energy if supervised else 0.0, cfg.lambda_force if supervised else 0.0)
    total = sum(w * t for w, t in zip(lam, parts))
    return LossBreakdown(*parts, total)


# -- runs -------------------------------------------------------------------------------

@dataclass
class TrainRun:
    config: TrainConfig
    params: dict
    opt: AdamState
    frames: list
    train_idx: np.ndarray
    energy_per_atom: float = 0.0
    step: int = 0
    log: list = field(default_factory=list)  # rows matching LOG_FIELDS
    skipped: list = field(default_factory=list)  # steps dropped for non-finite gradients


def mean_energy_per_atom(frames) -> float:
    vals = [m.energy / len(m) for m in frames if m.energy is not None]
    return float(np.mean(vals)) if vals else 0.0


def init_params(cfg: TrainConfig, energy_per_atom: float = 0.0) -> dict:
    enc = cfg.encoder
    params = encoder.init_generator(np.random.default_rng([cfg.seed, 101]), enc, cfg.sigma_p)
    params.update(encoder.init_denoiser(np.random.default_rng([cfg.seed, 102]), enc, energy_per_atom))
    return params


def new_run(cfg: TrainConfig, frames, train_idx=None, params: dict | None = None) -> TrainRun:
    frames = list(frames)
    idx = np.arange(len(frames)) if train_idx is None else np.asarray(train_idx, dtype=int)
    epa = mean_energy_per_atom([frames[i] for i in idx])
    if params is None:
        params = init_params(cfg, epa)
    opt = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    return TrainRun(cfg, dict(params), opt, frames, idx, epa)


def trainable_names(run: TrainRun, freeze_generator: bool = False) -> list[str]:
    frozen = freeze_generator or run.config.freeze_generator
    return [k for k in sorted(run.params) if not (frozen and k.startswith("gen."))]


def _step(run: TrainRun, molecules, supervised: bool, freeze_generator: bool = False) -> LossBreakdown:
    cfg = run.config
    if molecules is None:
        if len(run.train_idx) == 0:
            raise ValueError("no training frames")
        molecules = [run.frames[run.train_idx[i]] for i in batch_indices(cfg, len(run.train_idx), run.step)]
    batch = make_batch(molecules)
    draws = draw_noise(cfg, batch, run.step, pretrain=not supervised)
    tape = ad.Tape()
    names = trainable_names(run, freeze_generator)
    live = dict(run.params)
    for k in names:
        live[k] = tape.var(run.params[k])
    parts = batch_losses(cfg, live, batch, draws, supervised)
    if ad.is_var(parts.total):
        g = tape.backward(parts.total)
        grads = {k: g[live[k]] for k in names}
    else:
        grads = {k: np.zeros_like(run.params[k]) for k in names}
    try:
        run.params = optimizer_step(run.opt, run.params, grads)
    except NonFiniteGradient as exc:
        log.warning("step %d skipped: %s", run.step, exc)
        run.skipped.append(run.step)
    out = parts.values()
    run.log.append(out.row(run.step))
    run.step += 1
    return out


def pretrain_step(run: TrainRun, molecules=None) -> LossBreakdown:
    """Perturb every atom with generated noise and train denoiser and generator jointly."""
    return _step(run, molecules, supervised=False)


def supervised_step(run: TrainRun, molecules=None) -> LossBreakdown:
    """Energy and force training with partial corruption and auxiliary denoising."""
    return _step(run, molecules, supervised=True)


def finetune(run: TrainRun, molecules=None) -> LossBreakdown:
    """:func:`supervised_step` with the noise generator held fixed."""
    return _step(run, molecules, supervised=True, freeze_generator=True)


def train(run: TrainRun, n_steps: int, supervised: bool, callback=None) -> TrainRun:
    step_fn = supervised_step if supervised else pretrain_step
    if supervised and run.config.freeze_generator:
        step_fn = finetune
    for _ in range(n_steps):
        parts = step_fn(run)
        if callback is not None:
            callback(run, parts)
    return run


# -- evaluation -------------------------------------------------------------------------

def predict(params: dict, cfg: TrainConfig, molecules) -> tuple[np.ndarray, np.ndarray]:
    """Clean-input energies ``(B,)`` and forces ``(N_total, 3)``."""
    enc = cfg.encoder
    batch = make_batch(molecules)
    c, nb = batch_edges(batch.positions, batch.offsets, enc.cutoff)
    _, dist, unit = encoder.edge_geometry(batch.positions, c, nb)
    h = encoder.encode(params, "den", enc, batch.species, c, nb, dist)
    e = encoder.energy_readout(params, h, batch.mol_index, batch.n_mols)
    f = encoder.vector_readout(params, "den.force", h, c, nb, dist, unit, batch.n_atoms, enc)
    return e, f


def force_metrics(params: dict, cfg: TrainConfig, molecules) -> dict:
    """Force MAE, RMS of the labels, their ratio and the cosine between all predicted and true forces."""
    _, f_hat = predict(params, cfg, molecules)
    f = np.concatenate([m.forces for m in molecules])
    mae = float(np.mean(np.abs(f_hat - f)))
    rms = float(np.sqrt(np.mean(f * f)))
    cos = float(np.sum(f_hat * f) / (np.linalg.norm(f_hat) * np.linalg.norm(f) + 1e-300))
    return {"force_mae": mae, "force_rms": rms, "mae_over_rms": mae / rms if rms else float("inf"), "cosine": cos}


# -- persistence ------------------------------------------------------------------------

def save_checkpoint(run: TrainRun, path, phase: str = "pretrain") -> None:
    """Params, optimizer moments, step and RNG key as JSON (floats round-trip exactly).

    ``phase`` records which procedure produced the weights so a supervised
    run can tell a resume from a start on pretrained weights.
    """
    cfg = run.config
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "phase": phase,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "step": run.step,
        "energy_per_atom": run.energy_per_atom,
        "train_idx": [int(i) for i in run.train_idx],
        "params": encoder.tensors_to_json(run.params),
        "optimizer": {"t": run.opt.t, "m": encoder.tensors_to_json(run.opt.m),
                      "v": encoder.tensors_to_json(run.opt.v)},
        "rng": {"seed": cfg.seed, "step": run.step},
        "skipped": run.skipped,
    }
    Path(path).write_text(json.dumps(blob), encoding="utf-8")


def load_checkpoint(path, frames=None, config: TrainConfig | None = None) -> TrainRun:
    """Rebuild a :class:`TrainRun`.

    ``config`` may override the stored one (for instance to freeze the
    generator when fine-tuning); the optimizer restarts when the optimizer
    hyperparameters differ.
    """
    blob = json.loads(Path(path).read_text(encoding="utf-8"))
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a training checkpoint")
    stored = TrainConfig.from_dict(blob["config"])
    if stored.hash() != blob["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    cfg = stored if config is None else config
    params = encoder.tensors_from_json(blob["params"])
    run = TrainRun(cfg, params, AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay),
                   list(frames or []), np.array(blob["train_idx"], dtype=int), blob["energy_per_atom"],
                   blob["step"], [], list(blob.get("skipped", [])))
    same_opt = all(getattr(cfg, k) == getattr(stored, k)
                   for k in ("lr", "beta1", "beta2", "adam_eps", "weight_decay", "freeze_generator"))
    if same_opt:
        run.opt.t = blob["optimizer"]["t"]
        run.opt.m = encoder.tensors_from_json(blob["optimizer"]["m"])
        run.opt.v = encoder.tensors_from_json(blob["optimizer"]["v"])
    return run


def write_log(path, rows, append: bool = False) -> None:
    """CSV with columns ``step, anids, kl, gamma, energy, force, total``."""
    path = Path(path)
    fresh = not (append and path.exists())
    with path.open("w" if fresh else "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if fresh:
            w.writerow(LOG_FIELDS)
        for row in rows:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def read_log(path) -> list[list]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != LOG_FIELDS:
            raise ValueError(f"{path}: unexpected log header {header}")
        return [[int(row[0])] + [float(v) for v in row[1:]] for row in r]
