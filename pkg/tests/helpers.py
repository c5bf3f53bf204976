"""Vectors and configurations shared by the unit and integration tests."""

import numpy as np


# Small enough to train in well under a second.
TINY_CONFIG = """
world.per_concept = 20
index.kind = flat
schedule.steps = 5
schedule.continuous_steps = 20
model.model_dim = 16
model.heads = 2
model.layers = 1
model.ff_dim = 32
train.k = 3
train.steps = 3
train.batch_size = 4
train.eval_samples = 2
train.log_interval = 1
sample.samples = 2
manip.steps = 2
manip.pairs = 1
ablate.k_list = 1,3
ablate.fractions = 0.3,0.7
"""


def random_units(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    """Random unit vectors (count, dim)."""
    vectors = rng.standard_normal((count, dim))
    return vectors / np.linalg.norm(vectors, axis=1, keepdims=True)


def clustered_units(
    rng: np.random.Generator, count: int, dim: int, clusters: int, noise: float = 0.1
) -> np.ndarray:
    """Unit vectors scattered around `clusters` random directions."""
    centers = random_units(rng, clusters, dim)
    labels = rng.integers(clusters, size=count)
    vectors = centers[labels] + noise * rng.standard_normal((count, dim))
    return vectors / np.linalg.norm(vectors, axis=1, keepdims=True)


def grouped_units(
    rng: np.random.Generator,
    groups: int,
    size: int,
    dim: int,
    clusters: int,
    spread: float = 0.15,
    jitter: float = 0.02,
) -> tuple[np.ndarray, np.ndarray]:
    """Tight groups of `size` near-duplicate unit vectors, spread around `clusters` directions.

    Returns:
        The vectors (groups * size, dim), group-major, and the group centers (groups, dim).
    """
    centers = random_units(rng, clusters, dim)
    labels = rng.integers(clusters, size=groups)
    group_centers = centers[labels] + spread * rng.standard_normal((groups, dim))
    members = np.repeat(group_centers, size, axis=0)
    vectors = members + jitter * rng.standard_normal(members.shape)
    return vectors / np.linalg.norm(vectors, axis=1, keepdims=True), group_centers
