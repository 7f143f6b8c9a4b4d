"""Counter-keyed random streams.

Every draw is keyed by ``(seed, stream, sample index)`` through a Philox
generator, so a sample's noise never depends on batch size, ordering or the
number of workers that produced it.
"""

import numpy as np

CALIBRATION = 0
EVALUATION = 1
LABELS = 2
DATA = 3
PROJECTIONS = 4


def _gen(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream), int(index)])))


def normals(seed: int, stream: int, indices, dim: int) -> np.ndarray:
    """Standard normals, one ``dim``-vector per index."""
    indices = list(indices)
    out = np.empty((len(indices), dim))
    for row, idx in enumerate(indices):
        out[row] = _gen(seed, stream, idx).standard_normal(dim)
    return out


def uniforms(seed: int, stream: int, indices) -> np.ndarray:
    return np.array([_gen(seed, stream, idx).random() for idx in indices])


def choices(seed: int, stream: int, indices, options):
    """One uniformly chosen element of ``options`` per index."""
    options = list(options)
    return [options[int(_gen(seed, stream, idx).integers(len(options)))] for idx in indices]


def uniform_normals(seed: int, stream: int, indices, dim: int):
    """A uniform and a ``dim``-vector of normals from the same keyed generator."""
    indices = list(indices)
    u = np.empty(len(indices))
    eps = np.empty((len(indices), dim))
    for row, idx in enumerate(indices):
        g = _gen(seed, stream, idx)
        u[row] = g.random()
        eps[row] = g.standard_normal(dim)
    return u, eps
