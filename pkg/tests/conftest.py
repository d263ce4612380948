import numpy as np
import pytest

from occwm.grid import GridSpec


@pytest.fixture
def small_spec():
    """Tiny grid for brute-force oracle comparisons."""
    return GridSpec(dims=(10, 10, 4), voxel_size=0.5,
                    origin=(-2.5, -2.5, -1.0), num_classes=5)


@pytest.fixture
def toy_spec():
    return GridSpec.toy()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_labels(rng, spec):
    return rng.integers(0, spec.num_classes, size=spec.dims).astype(np.uint8)
