import numpy as np
import pytest

from ptychoep import sim
from ptychoep.core import ScanGeometry


def random_complex(rng, shape, scale=1.0):
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def small_dataset(seed=0, size=16, window=8, offsets=((0, 0), (4, 6), (8, 3)), snr_db=25.0,
                  random_probe=True):
    """Tiny dataset with a generic complex probe, for oracle comparisons."""
    rng = np.random.default_rng(seed)
    geom = ScanGeometry((size, size), (window, window), offsets)
    obj = random_complex(rng, (size, size))
    probe = random_complex(rng, (window, window)) if random_probe else sim.disk_probe((window, window), window - 2)
    return sim.simulate(obj, probe, geom, sim.NoiseSpec(snr_db, seed + 1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    return small_dataset()
