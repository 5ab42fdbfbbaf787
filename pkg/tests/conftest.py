import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from anids.encoder import EncoderConfig
from anids.moldata import Molecule

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SMALL = EncoderConfig(hidden=8, n_rbf=6, n_layers=2, cutoff=4.0, max_z=10, n_force=3)


def random_molecule(rng, n, box=2.0, min_dist=0.8, forces=False, energy=None):
    while True:
        x = rng.uniform(-box, box, (n, 3))
        d = np.linalg.norm(x[:, None] - x[None], axis=-1) + np.eye(n) * 1e9
        if n < 2 or d.min() > min_dist:
            break
    f = rng.normal(size=(n, 3)) if forces else None
    return Molecule(rng.integers(1, 10, n), x, f, energy)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return SMALL
