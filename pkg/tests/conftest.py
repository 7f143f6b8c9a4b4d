import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from iia_diffusion.harness import default_model  # noqa: E402
from iia_diffusion.score import GaussianMixture  # noqa: E402


@pytest.fixture(scope="session")
def gm():
    return default_model()


def random_mixture(rng, dim=None, K=None, conditions=True, min_scale=0.0):
    dim = int(rng.integers(1, 4)) if dim is None else dim
    K = int(rng.integers(1, 5)) if K is None else K
    conds = {}
    if conditions:
        for k in range(K):
            f = np.zeros(K)
            f[k] = 1.0
            conds[f"c{k}"] = f
    return GaussianMixture(
        weights=rng.uniform(0.1, 1.0, K),
        means=rng.normal(scale=3.0, size=(K, dim)),
        scales=rng.uniform(min_scale, 1.5, K),
        conditions=conds,
    )
