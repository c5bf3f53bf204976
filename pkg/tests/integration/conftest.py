"""Session-wide worlds and trained models for the slow tests."""

import pytest

from retrodiff.config import RunConfig
from retrodiff.embedspace import ConceptWorld, gen_world
from retrodiff.index.base import VectorIndex
from retrodiff.trainer.loop import (
    Corpus,
    TrainResult,
    build_training_index,
    prepare_corpus,
    train,
)


@pytest.fixture(scope="session")
def config() -> RunConfig:
    """The default run with guidance 4."""
    return RunConfig().with_overrides(train={"guidance": 4.0})


@pytest.fixture(scope="session")
def world(config: RunConfig) -> ConceptWorld:
    return gen_world(config.world.seed)


@pytest.fixture(scope="session")
def corpus(world: ConceptWorld, config: RunConfig) -> Corpus:
    return prepare_corpus(world, config)


@pytest.fixture(scope="session")
def index(corpus: Corpus, config: RunConfig) -> VectorIndex:
    return build_training_index(corpus, config)


@pytest.fixture(scope="session")
def trained(
    world: ConceptWorld, index: VectorIndex, config: RunConfig, corpus: Corpus
) -> TrainResult:
    return train(world, index, config, corpus=corpus)
