"""Train the default grid model and check that retrieval conditioning pays off."""

import numpy as np
import pytest

from retrodiff.config import RunConfig
from retrodiff.embedspace import ConceptWorld, embed_query
from retrodiff.index.base import VectorIndex
from retrodiff.index.flat import FlatIndex
from retrodiff.trainer.evaluate import evaluate
from retrodiff.trainer.loop import Corpus, TrainResult, loss_reduction

pytestmark = pytest.mark.slow


def test_queries_retrieve_their_concept(world: ConceptWorld, corpus: Corpus, config: RunConfig):
    index = FlatIndex(config.world.embed_dim)
    index.add_many(np.arange(world.size), corpus.embeddings)
    first, shared = [], []
    for seed in range(100):
        for concept in range(world.concept_count):
            query = embed_query(concept, world, 0.3, [seed, concept], corpus.encoder)
            labels = world.labels[index.search(query, 10).ids]
            first.append(labels[0] == concept)
            shared.append(np.mean(labels == concept))
    assert np.mean(first) >= 0.95
    assert np.mean(shared) >= 0.9


def test_training_halves_the_loss(trained: TrainResult, config: RunConfig):
    assert len(trained.history) == config.train.steps
    assert loss_reduction(trained.history, window=100) >= 0.5


def test_guided_samples_show_the_concept(
    trained: TrainResult,
    world: ConceptWorld,
    index: VectorIndex,
    config: RunConfig,
    corpus: Corpus,
):
    report = evaluate(trained.params, world, index, config, corpus=corpus)
    assert report.accuracy >= 0.8
    assert report.vlb is not None and np.isfinite(report.vlb)


def test_neighbors_beat_the_query_alone(
    trained: TrainResult,
    world: ConceptWorld,
    index: VectorIndex,
    config: RunConfig,
    corpus: Corpus,
):
    with_knn = evaluate(
        trained.params, world, index, config, k=10, corpus=corpus, with_vlb=False
    )
    alone = evaluate(trained.params, world, index, config, k=0, corpus=corpus, with_vlb=False)
    assert with_knn.accuracy - alone.accuracy >= 0.1


def test_guidance_does_not_hurt(
    trained: TrainResult,
    world: ConceptWorld,
    index: VectorIndex,
    config: RunConfig,
    corpus: Corpus,
):
    unguided = config.with_overrides(train={"guidance": 0.0})
    guided_report = evaluate(trained.params, world, index, config, corpus=corpus, with_vlb=False)
    unguided_report = evaluate(
        trained.params, world, index, unguided, corpus=corpus, with_vlb=False
    )
    assert guided_report.accuracy >= unguided_report.accuracy
