import numpy as np
import pytest

from spatial_affine.linear_estimators import Dataset
from spatial_affine.simgen import gm_catalog, generate_dataset


def gaussian_gm2(n=100, seed=0):
    """Gaussian-outcome dataset from the GM2 mechanism and its ring graph."""
    cfg = gm_catalog(n)[1].with_(outcome_family="gaussian")
    data, _ = generate_dataset(cfg, seed)
    return data, cfg.get_graph()


def random_dataset(n=40, p=2, seed=0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    z = rng.standard_normal(n) + X[:, 1]
    y = 0.5 * z + X @ rng.standard_normal(p) + rng.standard_normal(n)
    return Dataset(y=y, z=z, x_minus_z=X)


@pytest.fixture
def gm2_small():
    return gaussian_gm2(60, 3)
