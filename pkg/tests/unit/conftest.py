"""Configuration for pytest."""

import numpy as np
import pytest

from retrodiff.config import RunConfig
from retrodiff.denoiser.config import DenoiserConfig
from retrodiff.diffusion.discrete import make_schedule
from retrodiff.embedspace import ConceptWorld, GridEncoder, gen_world
from retrodiff.index.flat import FlatIndex
from tests.helpers import TINY_CONFIG


@pytest.fixture
def tiny_config() -> RunConfig:
    """A run small enough to train in well under a second."""
    return RunConfig.parse(TINY_CONFIG)


@pytest.fixture
def world() -> ConceptWorld:
    return gen_world(0, concepts=4, per_concept=20)


@pytest.fixture
def encoder() -> GridEncoder:
    return GridEncoder()


@pytest.fixture
def world_index(world: ConceptWorld, encoder: GridEncoder) -> FlatIndex:
    """Exact index over every sample of `world`, keyed by sample index."""
    index = FlatIndex(encoder.dim)
    index.add_many(np.arange(world.size), encoder.embed_grids(world.tokens))
    return index


@pytest.fixture
def small_schedule():
    return make_schedule(steps=10, vocab_size=5)


@pytest.fixture
def grid_config() -> DenoiserConfig:
    return DenoiserConfig(
        vocab_size=5,
        height=4,
        width=4,
        embed_dim=8,
        steps=10,
        neighbors=3,
        model_dim=16,
        heads=2,
        layers=1,
        ff_dim=32,
    )


@pytest.fixture
def eps_config() -> DenoiserConfig:
    return DenoiserConfig(
        kind="eps", embed_dim=8, steps=20, neighbors=3, model_dim=16, heads=2, ff_dim=32
    )
