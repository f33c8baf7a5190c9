import numpy as np
import pytest

from bohmeq.grid import Grid, WaveFunction, normalize


@pytest.fixture
def grid1():
    return Grid.uniform(20.0, 256)


@pytest.fixture
def gaussian1(grid1):
    x = grid1.axis(0)
    return normalize(WaveFunction(grid1, np.exp(-x**2 / 2)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_wavefunction(grid, rng, width=2.0):
    """Smooth, decaying random state on ``grid``."""
    mesh = grid.mesh()
    env = np.exp(-sum(m**2 for m in mesh) / (2 * width**2))
    poly = sum(np.tensordot(rng.normal(size=3), np.array([np.ones_like(m), m, m**2]), axes=1) for m in mesh)
    phase = sum(rng.normal() * m for m in mesh)
    return WaveFunction(grid, env * (1.5 + np.tanh(poly)) * np.exp(1j * phase))
