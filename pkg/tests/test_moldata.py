import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from anids import moldata
from anids.errors import CoincidentAtoms, Diverged, MissingLabels, ParseError
from anids.moldata import Molecule, ToyPotential

from conftest import random_molecule


def brute_pairs(pos, cutoff):
    out = set()
    for i, j in itertools.permutations(range(len(pos)), 2):
        r = np.linalg.norm(pos[i] - pos[j])
        if 0 < r <= cutoff:
            out.add((i, j))
    return out


# -- extxyz ------------------------------------------------------------------

def test_parse_single_atom():
    (mol,) = moldata.parse_extxyz("1\nenergy=-1.5\nH 0 0 0\n")
    assert mol.atomic_numbers.tolist() == [1]
    assert mol.energy == -1.5
    assert mol.forces is None
    np.testing.assert_array_equal(mol.positions, np.zeros((1, 3)))


def test_parse_properties_and_forces():
    text = (
        "2\n"
        'Lattice="10 0 0 0 10 0 0 0 10" Properties=species:S:1:pos:R:3:forces:R:3 energy=-3.25 pbc="T T T"\n'
        "O 0.0 0.0 0.0 0.1 0.2 0.3\n"
        "H 0.96 0.0 0.0 -0.1 -0.2 -0.3\n"
    )
    (mol,) = moldata.parse_extxyz(text)
    assert mol.atomic_numbers.tolist() == [8, 1]
    assert mol.energy == -3.25
    np.testing.assert_allclose(mol.forces[1], [-0.1, -0.2, -0.3])


def test_parse_numeric_species():
    (mol,) = moldata.parse_extxyz("1\n\n6 1 2 3\n")
    assert mol.atomic_numbers.tolist() == [6]
    assert mol.energy is None


@pytest.mark.parametrize(
    "text, line",
    [
        ("0\nenergy=1\n", 1),
        ("x\n\nH 0 0 0\n", 1),
        ("1\n\nQq 0 0 0\n", 3),
        ("1\n\nH 0 0\n", 3),
        ("2\n\nH 0 0 0\nH 1 0 0 0 0\n", 4),
        ("2\n\nH 0 0 0\n", 4),
        ("1\nProperties=species:S:1:pos:R:3:forces:R:3\nH 0 0 0\n", 3),
        ("1\n\nH 0 0 zero\n", 3),
        ("1\nenergy=abc\nH 0 0 0\n", 2),
    ],
)
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ParseError) as info:
        moldata.parse_extxyz(text)
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_round_trip_three_frames(rng):
    frames = [random_molecule(rng, n, forces=True, energy=float(rng.normal())) for n in (1, 3, 5)]
    frames[1].forces = None
    back = moldata.parse_extxyz(moldata.write_extxyz(frames))
    assert len(back) == 3
    for a, b in zip(frames, back):
        np.testing.assert_array_equal(a.atomic_numbers, b.atomic_numbers)
        np.testing.assert_allclose(a.positions, b.positions, atol=1e-8, rtol=0)
        assert (a.forces is None) == (b.forces is None)
        if a.forces is not None:
            np.testing.assert_allclose(a.forces, b.forces, atol=1e-8, rtol=0)
        assert a.energy == b.energy


@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_round_trip_is_exact(seed, n):
    rng = np.random.default_rng(seed)
    mol = random_molecule(rng, n, min_dist=0.0, forces=True, energy=float(rng.normal() * 100))
    (back,) = moldata.parse_extxyz(moldata.write_extxyz([mol]))
    np.testing.assert_array_equal(back.positions, mol.positions)
    np.testing.assert_array_equal(back.forces, mol.forces)
    assert back.energy == mol.energy


def test_empty_text():
    assert moldata.parse_extxyz("") == []
    assert moldata.write_extxyz([]) == ""


def test_molecule_validation():
    with pytest.raises(ValueError):
        Molecule([], np.zeros((0, 3)))
    with pytest.raises(ValueError):
        Molecule([1, 1], np.zeros((1, 3)))
    with pytest.raises(ValueError):
        Molecule([0], np.zeros((1, 3)))
    with pytest.raises(ValueError):
        Molecule([1], np.zeros((1, 3)), forces=np.zeros((2, 3)))


# -- neighbor lists ------------------------------------------------------------

def test_pair_inside_cutoff():
    mol = Molecule([1, 1], [[0, 0, 0], [1, 0, 0]])
    nl = moldata.build_neighbors(mol, 1.5)
    assert [len(nl.of(i)) for i in range(2)] == [1, 1]
    j, vec, dist = nl.of(0)[0]
    assert j == 1
    np.testing.assert_array_equal(vec, [-1.0, 0.0, 0.0])
    assert dist == 1.0


def test_pair_outside_cutoff():
    mol = Molecule([1, 1], [[0, 0, 0], [1, 0, 0]])
    nl = moldata.build_neighbors(mol, 0.5)
    assert len(nl) == 0
    assert nl.of(0) == [] and nl.of(1) == []


def test_boundary_pair_included():
    mol = Molecule([1, 1], [[0, 0, 0], [0, 0, 1.25]])
    assert len(moldata.build_neighbors(mol, 1.25)) == 2


def test_fifty_atoms_match_brute_force(rng):
    pos = rng.uniform(0, 6, (50, 3))
    nl = moldata.build_neighbors(pos, 2.0)
    got = set(zip(nl.center.tolist(), nl.neighbor.tolist()))
    assert got == brute_pairs(pos, 2.0)
    np.testing.assert_array_equal(nl.vectors, pos[nl.center] - pos[nl.neighbor])
    assert np.all(nl.distances <= 2.0)


@given(st.integers(0, 2**32 - 1), st.integers(1, 25), st.floats(0.1, 4.0))
def test_neighbors_symmetric_and_complete(seed, n, cutoff):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0, 3, (n, 3))
    nl = moldata.build_neighbors(pos, cutoff)
    got = set(zip(nl.center.tolist(), nl.neighbor.tolist()))
    assert got == brute_pairs(pos, cutoff)
    assert got == {(j, i) for i, j in got}


def test_coincident_atoms():
    mol = Molecule([1, 1], [[0, 0, 0], [0, 0, 5e-7]])
    with pytest.raises(CoincidentAtoms):
        moldata.build_neighbors(mol, 1.0)


def test_cutoff_must_be_positive():
    with pytest.raises(ValueError):
        moldata.build_neighbors(Molecule([1], [[0, 0, 0]]), 0.0)


# -- potentials ----------------------------------------------------------------

def _potentials(rng):
    n = 4
    ref = rng.uniform(-1, 1, (n, 3))
    a = rng.normal(size=(n, 3, 3))
    tether = a @ np.swapaxes(a, 1, 2) + np.eye(3)
    lj_ref = np.array([[0, 0, 0], [1.2, 0, 0], [0, 1.2, 0], [0, 0, 1.2]], float)
    return [
        ToyPotential("harmonic", [1] * n, ref, tether=tether, bonds=((0, 1, 5.0, 1.1), (2, 3, 2.0, 0.9))),
        ToyPotential("lennard-jones", [1] * n, lj_ref, epsilon=0.3, sigma=1.0),
        moldata.harmonic_diatomic(),
    ]


def test_forces_match_finite_differences(rng):
    h = 1e-5
    for pot in _potentials(rng):
        for _ in range(100):
            x = pot.reference + rng.normal(scale=0.1, size=pot.reference.shape)
            f = pot.forces(x)
            num = np.empty_like(x)
            for idx in np.ndindex(x.shape):
                xp, xm = x.copy(), x.copy()
                xp[idx] += h
                xm[idx] -= h
                num[idx] = -(pot.energy(xp) - pot.energy(xm)) / (2 * h)
            err = np.max(np.abs(num - f))
            assert err <= 1e-5 * max(1.0, np.max(np.abs(f))), (pot.kind, err)


def test_potential_dict_round_trip(rng):
    for pot in _potentials(rng):
        back = ToyPotential.from_dict(pot.to_dict())
        x = pot.reference + 0.05
        assert back.energy(x) == pot.energy(x)
        np.testing.assert_array_equal(back.forces(x), pot.forces(x))


def test_presets():
    pot = ToyPotential.from_dict({"preset": "harmonic_diatomic", "k": 4.0})
    assert pot.energy(pot.reference) == -10.0
    assert pot.max_stiffness() == pytest.approx(8.0, rel=1e-6)
    with pytest.raises(ValueError):
        ToyPotential.from_dict({"preset": "nope"})


# -- sampling ----------------------------------------------------------------------

def test_equipartition_single_well():
    pot = moldata.harmonic_well(k=1.0)
    frames = moldata.sample_boltzmann(pot, 4000, 0.1, seed=3, corr_steps=200)
    x = np.concatenate([f.positions for f in frames])
    var = x.var(axis=0)
    np.testing.assert_allclose(var, 0.1, rtol=0.05)


def test_frames_carry_exact_labels():
    pot = moldata.harmonic_diatomic()
    for mol in moldata.sample_boltzmann(pot, 20, 0.1, seed=0):
        assert mol.energy == pot.energy(mol.positions)
        np.testing.assert_array_equal(mol.forces, pot.forces(mol.positions))


def test_zero_temperature_limit():
    pot = moldata.harmonic_well(k=1.0, n_atoms=3)
    frames = moldata.sample_boltzmann(pot, 10, 1e-12, seed=1, corr_steps=50, burn_in=500)
    for mol in frames:
        np.testing.assert_allclose(mol.positions, pot.reference, atol=1e-5)


def test_sampling_is_deterministic():
    pot = moldata.harmonic_diatomic()
    a = moldata.sample_boltzmann(pot, 15, 0.1, seed=9)
    b = moldata.sample_boltzmann(pot, 15, 0.1, seed=9)
    c = moldata.sample_boltzmann(pot, 15, 0.1, seed=10)
    for x, y in zip(a, b):
        assert x.positions.tobytes() == y.positions.tobytes()
    assert not np.array_equal(a[0].positions, c[0].positions)


def test_divergence_detected():
    pot = moldata.harmonic_well(k=1.0)
    with pytest.raises(Diverged):
        moldata.sample_boltzmann(pot, 5, 0.1, seed=0, dt=3.0)


def test_bad_temperature():
    with pytest.raises(ValueError):
        moldata.sample_boltzmann(moldata.harmonic_well(), 1, 0.0, seed=0)


# -- datasets and batching ------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    pot = moldata.harmonic_diatomic()
    frames = moldata.sample_boltzmann(pot, 6, 0.1, seed=2)
    moldata.write_dataset(tmp_path, frames, {"train": [0, 1, 2, 3], "val": [4, 5]}, pot, {"note": 1})
    back, manifest = moldata.read_dataset(tmp_path)
    assert manifest["splits"] == {"train": [0, 1, 2, 3], "val": [4, 5]}
    assert manifest["meta"] == {"note": 1}
    assert ToyPotential.from_dict(manifest["potential"]).energy(pot.reference) == pot.energy(pot.reference)
    for a, b in zip(frames, back):
        np.testing.assert_array_equal(a.positions, b.positions)
        assert a.energy == b.energy


def test_empty_dataset(tmp_path):
    moldata.write_dataset(tmp_path, [], {"train": [], "val": []})
    frames, manifest = moldata.read_dataset(tmp_path / moldata.MANIFEST_FILE)
    assert frames == [] and manifest["n_frames"] == 0


def test_manifest_count_mismatch(tmp_path):
    frames = [Molecule([1], [[0, 0, 0]])]
    moldata.write_dataset(tmp_path, frames, {})
    (tmp_path / moldata.FRAMES_FILE).write_text("")
    with pytest.raises(ParseError):
        moldata.read_dataset(tmp_path)


def test_batch_layout(rng):
    mols = [random_molecule(rng, n) for n in (2, 3, 1)]
    batch = moldata.make_batch(mols)
    assert batch.n_mols == 3 and batch.n_atoms == 6
    assert batch.mol_index.tolist() == [0, 0, 1, 1, 1, 2]
    assert batch.counts().tolist() == [2, 3, 1]
    c, n = moldata.batch_edges(batch.positions, batch.offsets, 10.0)
    assert np.all(batch.mol_index[c] == batch.mol_index[n])
    assert len(c) == 2 + 6
    with pytest.raises(MissingLabels):
        batch.forces()
    with pytest.raises(MissingLabels):
        batch.energies()
    with pytest.raises(ValueError):
        moldata.make_batch([])
