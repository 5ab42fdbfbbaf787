"""Molecules, extended-XYZ I/O, neighbor lists and synthetic Boltzmann data."""
from __future__ import annotations

import json
import math
import shlex
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import CoincidentAtoms, Diverged, MissingLabels, ParseError

ELEMENTS = (
    "X H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn"
).split()
SYMBOL_TO_Z = {s: z for z, s in enumerate(ELEMENTS) if z > 0}

COINCIDENT_TOL = 1e-6


@dataclass
class Molecule:
    """Atomic numbers, positions (Å) and optional forces (eV/Å) and energy (eV)."""

    atomic_numbers: np.ndarray
    positions: np.ndarray
    forces: np.ndarray | None = None
    energy: float | None = None

    def __post_init__(self):
        self.atomic_numbers = np.asarray(self.atomic_numbers, dtype=int).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = len(self.atomic_numbers)
        if n < 1:
            raise ValueError("a molecule needs at least one atom")
        if len(self.positions) != n:
            raise ValueError(f"{n} atomic numbers but {len(self.positions)} positions")
        if np.any(self.atomic_numbers < 1):
            raise ValueError("atomic numbers must be >= 1")
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=float).reshape(-1, 3)
            if len(self.forces) != n:
                raise ValueError(f"{n} atoms but {len(self.forces)} force rows")
        if self.energy is not None:
            self.energy = float(self.energy)

    def __len__(self):
        return len(self.atomic_numbers)

    def with_positions(self, positions: np.ndarray) -> "Molecule":
        return Molecule(self.atomic_numbers, positions, self.forces, self.energy)


# -- extended XYZ -----------------------------------------------------------

def _parse_comment(line: str, lineno: int) -> dict[str, str]:
    try:
        tokens = shlex.split(line, posix=True)
    except ValueError as exc:
        raise ParseError(f"unbalanced quotes in comment line ({exc})", lineno) from None
    props = {}
    for tok in tokens:
        if "=" in tok:
            key, val = tok.split("=", 1)
            props[key.strip().lower()] = val.strip()
    return props


def _force_columns(props: dict[str, str]) -> bool | None:
    spec = props.get("properties")
    if spec is None:
        return None
    return "forces:" in spec.lower()


def parse_extxyz(text: str) -> list[Molecule]:
    """Parse every frame of an extended-XYZ string.

    The comment line is read as ``key=value`` pairs; ``energy`` is kept,
    everything else (``Lattice``, ``pbc``, ...) is ignored.  Atom rows carry
    ``species x y z`` and optionally ``fx fy fz``.
    """
    lines = text.splitlines()
    frames = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        lineno = i + 1
        try:
            n = int(lines[i].split()[0])
        except ValueError:
            raise ParseError(f"expected an atom count, got {lines[i]!r}", lineno) from None
        if n < 1:
            raise ParseError(f"atom count must be positive, got {n}", lineno)
        if i + 1 >= len(lines):
            raise ParseError("missing comment line", lineno + 1)
        props = _parse_comment(lines[i + 1], lineno + 1)
        has_forces = _force_columns(props)
        z = np.empty(n, dtype=int)
        pos = np.empty((n, 3))
        frc = np.empty((n, 3))
        for k in range(n):
            row_no = i + 2 + k
            if row_no >= len(lines):
                raise ParseError(f"frame declares {n} atoms but file ends after {k}", row_no + 1)
            cols = lines[row_no].split()
            if has_forces is None:
                ok = len(cols) in (4, 7)
                has_forces = len(cols) == 7
            else:
                ok = len(cols) == (7 if has_forces else 4)
            if not ok:
                raise ParseError(f"wrong column count {len(cols)}", row_no + 1)
            sym = cols[0]
            if sym in SYMBOL_TO_Z:
                z[k] = SYMBOL_TO_Z[sym]
            elif sym.isdigit() and int(sym) > 0:
                z[k] = int(sym)
            else:
                raise ParseError(f"unknown species {sym!r}", row_no + 1)
            try:
                pos[k] = [float(c) for c in cols[1:4]]
                if has_forces:
                    frc[k] = [float(c) for c in cols[4:7]]
            except ValueError:
                raise ParseError("non-numeric coordinate or force", row_no + 1) from None
        energy = props.get("energy")
        try:
            energy = None if energy is None else float(energy)
        except ValueError:
            raise ParseError(f"bad energy value {energy!r}", lineno + 1) from None
        frames.append(Molecule(z, pos, frc if has_forces else None, energy))
        i += 2 + n
    return frames


def write_extxyz(molecules) -> str:
    out = []
    for mol in molecules:
        has_forces = mol.forces is not None
        props = "species:S:1:pos:R:3" + (":forces:R:3" if has_forces else "")
        comment = f"Properties={props}"
        if mol.energy is not None:
            comment += f" energy={mol.energy!r}"
        comment += ' pbc="F F F"'
        out.append(str(len(mol)))
        out.append(comment)
        for k in range(len(mol)):
            row = [ELEMENTS[mol.atomic_numbers[k]]] + [repr(float(c)) for c in mol.positions[k]]
            if has_forces:
                row += [repr(float(c)) for c in mol.forces[k]]
            out.append(" ".join(row))
    return "\n".join(out) + "\n" if out else ""


def read_extxyz(path) -> list[Molecule]:
    return parse_extxyz(Path(path).read_text(encoding="utf-8"))


def save_extxyz(path, molecules) -> None:
    Path(path).write_text(write_extxyz(molecules), encoding="utf-8")


# -- neighbor lists ---------------------------------------------------------

@dataclass
class NeighborList:
    """Directed edges ``(center, neighbor)`` sorted by center then neighbor.

    ``vectors[e] = X[center[e]] - X[neighbor[e]]`` and ``distances[e]`` is its norm.
    """

    n_atoms: int
    center: np.ndarray
    neighbor: np.ndarray
    vectors: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return len(self.center)

    def of(self, i: int) -> list[tuple[int, np.ndarray, float]]:
        sel = np.flatnonzero(self.center == i)
        return [(int(self.neighbor[e]), self.vectors[e], float(self.distances[e])) for e in sel]


def build_neighbors(mol, cutoff: float) -> NeighborList:
    """All pairs with ``0 < |r_ij| <= cutoff`` (boundary included), both directions."""
    if not cutoff > 0:
        raise ValueError("cutoff must be positive")
    pos = mol.positions if isinstance(mol, Molecule) else np.asarray(mol, dtype=float)
    n = len(pos)
    tree = cKDTree(pos)
    if n > 1 and tree.query_pairs(COINCIDENT_TOL):
        raise CoincidentAtoms(f"two atoms closer than {COINCIDENT_TOL} Å")
    # query_pairs is inclusive of the radius but the float test is redone below
    pairs = tree.query_pairs(cutoff * (1 + 1e-12) + 1e-12, output_type="ndarray")
    if len(pairs):
        center = np.concatenate([pairs[:, 0], pairs[:, 1]])
        neighbor = np.concatenate([pairs[:, 1], pairs[:, 0]])
        vec = pos[center] - pos[neighbor]
        dist = np.sqrt(np.sum(vec * vec, axis=1))
        keep = dist <= cutoff
        center, neighbor, vec, dist = center[keep], neighbor[keep], vec[keep], dist[keep]
        order = np.lexsort((neighbor, center))
        center, neighbor, vec, dist = center[order], neighbor[order], vec[order], dist[order]
    else:
        center = neighbor = np.zeros(0, dtype=int)
        vec = np.zeros((0, 3))
        dist = np.zeros(0)
    return NeighborList(n, center.astype(int), neighbor.astype(int), vec, dist)


# -- toy potentials ---------------------------------------------------------

@dataclass
class ToyPotential:
    """Analytic potential energy surface used to synthesize labelled data.

    ``harmonic``: per-atom tethers ``0.5 * d_i^T K_i d_i`` about ``reference``
    plus optional bond springs ``0.5 * k (|r_ij| - r0)^2``.
    ``lennard-jones``: ``4 eps ((s/r)^12 - (s/r)^6)`` over all pairs, with
    ``epsilon``/``sigma`` scalars or ``(N, N)`` per-pair arrays.
    """

    kind: str
    atomic_numbers: np.ndarray
    reference: np.ndarray
    tether: np.ndarray | None = None
    bonds: tuple = ()
    epsilon: float | np.ndarray = 1.0
    sigma: float | np.ndarray = 1.0
    energy_offset: float = 0.0
    _pairs: tuple = field(init=False, repr=False, default=())

    def __post_init__(self):
        if self.kind not in ("harmonic", "lennard-jones"):
            raise ValueError(f"unknown potential kind {self.kind!r}")
        self.atomic_numbers = np.asarray(self.atomic_numbers, dtype=int).reshape(-1)
        self.reference = np.asarray(self.reference, dtype=float).reshape(-1, 3)
        n = len(self.atomic_numbers)
        if len(self.reference) != n:
            raise ValueError("reference positions do not match atom count")
        if self.tether is not None:
            t = np.asarray(self.tether, dtype=float)
            if t.ndim <= 1:
                t = np.broadcast_to(t.reshape(-1, 1, 1) * np.eye(3), (n, 3, 3))
            self.tether = np.array(t, dtype=float).reshape(n, 3, 3)
        self.bonds = tuple((int(i), int(j), float(k), float(r0)) for i, j, k, r0 in self.bonds)
        iu, ju = np.triu_indices(n, 1)
        self._pairs = (iu, ju)

    @property
    def n_atoms(self) -> int:
        return len(self.atomic_numbers)

    def _pair_param(self, p):
        p = np.asarray(p, dtype=float)
        if p.ndim == 0:
            return p
        iu, ju = self._pairs
        return p[iu, ju]

    def energy(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float).reshape(-1, 3)
        e = self.energy_offset
        if self.kind == "harmonic":
            if self.tether is not None:
                d = x - self.reference
                e += 0.5 * float(np.einsum("ni,nij,nj->", d, self.tether, d))
            for i, j, k, r0 in self.bonds:
                r = np.linalg.norm(x[i] - x[j])
                e += 0.5 * k * (r - r0) ** 2
        else:
            iu, ju = self._pairs
            r = np.linalg.norm(x[iu] - x[ju], axis=1)
            sr6 = (self._pair_param(self.sigma) / r) ** 6
            e += float(np.sum(4.0 * self._pair_param(self.epsilon) * (sr6 * sr6 - sr6)))
        return float(e)

    def forces(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, 3)
        f = np.zeros_like(x)
        if self.kind == "harmonic":
            if self.tether is not None:
                f -= np.einsum("nij,nj->ni", self.tether, x - self.reference)
            for i, j, k, r0 in self.bonds:
                rij = x[i] - x[j]
                r = np.linalg.norm(rij)
                fi = -k * (r - r0) * rij / r
                f[i] += fi
                f[j] -= fi
        else:
            iu, ju = self._pairs
            rij = x[iu] - x[ju]
            r = np.linalg.norm(rij, axis=1)
            s6 = self._pair_param(self.sigma) ** 6
            eps = self._pair_param(self.epsilon)
            dedr = 4.0 * eps * (-12.0 * s6 * s6 / r**13 + 6.0 * s6 / r**7)
            fij = -(dedr / r)[:, None] * rij
            np.add.at(f, iu, fij)
            np.add.at(f, ju, -fij)
        return f

    def max_stiffness(self, x: np.ndarray | None = None, h: float = 1e-5) -> float:
        """Largest |eigenvalue| of the finite-difference Hessian at ``x``."""
        x = self.reference if x is None else np.asarray(x, dtype=float)
        n3 = x.size
        hess = np.empty((n3, n3))
        flat = x.reshape(-1)
        for k in range(n3):
            xp = flat.copy()
            xm = flat.copy()
            xp[k] += h
            xm[k] -= h
            hess[:, k] = -(self.forces(xp) - self.forces(xm)).reshape(-1) / (2 * h)
        return float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (hess + hess.T)))))

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "atomic_numbers": self.atomic_numbers.tolist(),
            "reference": self.reference.tolist(),
            "tether": None if self.tether is None else self.tether.tolist(),
            "bonds": [list(b) for b in self.bonds],
            "epsilon": np.asarray(self.epsilon).tolist(),
            "sigma": np.asarray(self.sigma).tolist(),
            "energy_offset": self.energy_offset,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyPotential":
        d = dict(d)
        preset = d.pop("preset", None)
        if preset == "harmonic_diatomic":
            return harmonic_diatomic(**d)
        if preset == "harmonic_well":
            return harmonic_well(**d)
        if preset is not None:
            raise ValueError(f"unknown potential preset {preset!r}")
        return cls(**d)


def harmonic_well(k: float = 1.0, n_atoms: int = 1, spacing: float = 3.0, atomic_number: int = 1,
                  energy_offset: float = 0.0) -> ToyPotential:
    """Independent isotropic tethers on a line of atoms."""
    ref = np.zeros((n_atoms, 3))
    ref[:, 0] = spacing * np.arange(n_atoms)
    return ToyPotential("harmonic", [atomic_number] * n_atoms, ref, tether=np.full(n_atoms, float(k)),
                        energy_offset=energy_offset)


def harmonic_diatomic(k: float = 10.0, r0: float = 1.0, atomic_numbers=(1, 1),
                      energy_offset: float = -10.0) -> ToyPotential:
    """Two atoms joined by a bond spring; translation and rotation are free."""
    ref = np.array([[0.0, 0.0, 0.0], [r0, 0.0, 0.0]])
    return ToyPotential("harmonic", atomic_numbers, ref, bonds=((0, 1, k, r0),), energy_offset=energy_offset)


def sample_boltzmann(pot: ToyPotential, n_frames: int, temperature: float, seed: int,
                     dt: float | None = None, corr_steps: int = 100, burn_in: int | None = None) -> list[Molecule]:
    """Overdamped Langevin (Euler-Maruyama) frames from ``exp(-E/kT)``.

    ``temperature`` is ``k_B T`` in eV.  The default step is ``0.01 / k_max``
    with ``k_max`` the stiffest Hessian mode at the reference, so
    ``corr_steps`` steps span about one relaxation time of that mode.  One
    frame is kept every ``corr_steps`` steps after ``burn_in`` (default ten
    correlation times) steps are discarded.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    x = pot.reference.copy()
    f = pot.forces(x)
    if not np.all(np.isfinite(f)):
        raise ValueError("forces are not finite at the start configuration")
    if dt is None:
        dt = 0.01 / max(pot.max_stiffness(x), 1e-12)
    burn = 10 * corr_steps if burn_in is None else burn_in
    rng = np.random.default_rng(seed)
    kick = math.sqrt(2.0 * temperature * dt)
    frames = []
    total = burn + n_frames * corr_steps
    for step in range(total):
        x = x + dt * f + kick * rng.standard_normal(x.shape)
        if not np.all(np.abs(x) < 1e3):
            raise Diverged(f"coordinate left the 1e3 Å box at step {step}; reduce dt")
        f = pot.forces(x)
        if step >= burn and (step - burn + 1) % corr_steps == 0:
            frames.append(Molecule(pot.atomic_numbers, x.copy(), f.copy(), pot.energy(x)))
    return frames


# -- dataset on disk ----------------------------------------------------------

FRAMES_FILE = "frames.extxyz"
MANIFEST_FILE = "manifest.json"


def write_dataset(out_dir, frames, splits: dict[str, list[int]], potential: ToyPotential | None = None,
                  meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_extxyz(out / FRAMES_FILE, frames)
    manifest = {
        "format": "extxyz",
        "frames": FRAMES_FILE,
        "n_frames": len(frames),
        "splits": {k: [int(i) for i in v] for k, v in splits.items()},
        "potential": None if potential is None else potential.to_dict(),
        "meta": meta or {},
    }
    path = out / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_dataset(path) -> tuple[list[Molecule], dict]:
    """Load ``(frames, manifest)`` from a dataset directory or manifest file."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_FILE
    manifest = json.loads(p.read_text(encoding="utf-8"))
    frames = read_extxyz(p.parent / manifest["frames"])
    if len(frames) != manifest["n_frames"]:
        raise ParseError(f"manifest lists {manifest['n_frames']} frames, file has {len(frames)}")
    return frames, manifest


# -- batching ---------------------------------------------------------------------

@dataclass
class Batch:
    """Several molecules flattened into one disjoint graph."""

    molecules: list
    species: np.ndarray
    positions: np.ndarray
    mol_index: np.ndarray
    offsets: np.ndarray

    @property
    def n_mols(self) -> int:
        return len(self.molecules)

    @property
    def n_atoms(self) -> int:
        return len(self.species)

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def forces(self) -> np.ndarray:
        if any(m.forces is None for m in self.molecules):
            raise MissingLabels("every molecule needs force labels")
        return np.concatenate([m.forces for m in self.molecules])

    def energies(self) -> np.ndarray:
        if any(m.energy is None for m in self.molecules):
            raise MissingLabels("every molecule needs an energy label")
        return np.array([m.energy for m in self.molecules])


def make_batch(molecules) -> Batch:
    molecules = list(molecules)
    if not molecules:
        raise ValueError("empty batch")
    counts = np.array([len(m) for m in molecules])
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return Batch(
        molecules,
        np.concatenate([m.atomic_numbers for m in molecules]),
        np.concatenate([m.positions for m in molecules]),
        np.repeat(np.arange(len(molecules)), counts),
        offsets,
    )


def batch_edges(positions: np.ndarray, offsets: np.ndarray, cutoff: float) -> tuple[np.ndarray, np.ndarray]:
    """Neighbor ``(center, neighbor)`` index arrays of a batch, molecule by molecule."""
    centers, neighbors = [], []
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        nl = build_neighbors(positions[lo:hi], cutoff)
        centers.append(nl.center + lo)
        neighbors.append(nl.neighbor + lo)
    return np.concatenate(centers).astype(int), np.concatenate(neighbors).astype(int)
