"""Train the manipulation model and check restoration and identity edits."""

import numpy as np
import pytest

from retrodiff.config import RunConfig
from retrodiff.editkit.manip import apply_manip, make_manip_pair, sample_region, train_manip
from retrodiff.embedspace import ConceptWorld, TokenGrid
from retrodiff.index.base import VectorIndex
from retrodiff.trainer.loop import Corpus, TrainResult

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def manip_model(
    world: ConceptWorld, index: VectorIndex, config: RunConfig, corpus: Corpus
) -> TrainResult:
    return train_manip(world, index, config, corpus=corpus)


def test_manipulation_loss_halves(manip_model: TrainResult):
    first = np.mean([r.loss for r in manip_model.history[:100]])
    last = np.mean([r.loss for r in manip_model.history[-100:]])
    assert last <= 0.5 * first


def test_restores_held_out_regions(
    manip_model: TrainResult, world: ConceptWorld, index: VectorIndex, corpus: Corpus
):
    rng = np.random.default_rng(11)
    restored = total = 0
    for seed, id_ in enumerate(corpus.heldout_ids.tolist()):
        grid = world.grid(id_)
        region = sample_region(rng, *world.grid_shape)
        pair = make_manip_pair(grid, index, world, corpus.encoder, region)
        manipulated = TokenGrid(pair.manip, world.vocab_size)
        result = apply_manip(manip_model.params, manipulated, pair.cond, None, seed, index)
        keep = region.keep()
        restored += int(np.sum(result.grid.tokens[keep] == pair.grid[keep]))
        total += int(keep.sum())
    assert restored / total >= 0.9


def test_self_conditioning_keeps_the_grid(
    manip_model: TrainResult, world: ConceptWorld, index: VectorIndex, corpus: Corpus
):
    unchanged = total = 0
    for seed, id_ in enumerate(corpus.heldout_ids.tolist()):
        grid = world.grid(id_)
        query = corpus.encoder.embed_grid(grid)
        result = apply_manip(manip_model.params, grid, query, None, seed, index)
        unchanged += int(np.sum(~result.changed))
        total += result.changed.size
    assert unchanged / total >= 0.9


def test_reconstruction_without_regions(
    world: ConceptWorld, index: VectorIndex, config: RunConfig, corpus: Corpus
):
    result = train_manip(world, index, config, corpus=corpus, mask_regions=False)
    exact = []
    for seed, id_ in enumerate(corpus.heldout_ids.tolist()):
        grid = world.grid(id_)
        edited = apply_manip(
            result.params, grid, corpus.encoder.embed_grid(grid), None, seed, index
        )
        exact.append(np.mean(~edited.changed))
    assert np.mean(exact) >= 0.9
