"""Sweep structures of the ablation harnesses on the default run."""

import numpy as np
import pytest

from retrodiff.config import RunConfig
from retrodiff.denoiser.condition import FusionVariant
from retrodiff.embedspace import ConceptWorld
from retrodiff.index.base import VectorIndex
from retrodiff.trainer.ablation import ablate_fusion, ablate_index_fraction, ablate_k
from retrodiff.trainer.loop import TrainResult

pytestmark = pytest.mark.slow


def test_k_sweep(
    trained: TrainResult, world: ConceptWorld, index: VectorIndex, config: RunConfig
):
    rows = ablate_k(world, config, params=trained.params, index=index)
    assert [row.k for row in rows] == [1, 5, 10, 20, 100, 1000, None]
    truncated = {row.k: row.truncated for row in rows}
    assert truncated[1000]
    assert not any(truncated[k] for k in (1, 5, 10, 20, 100))
    best = max(row.accuracy for row in rows if row.k is not None)
    assert rows[-1].accuracy <= best


def test_index_fraction_sweep(
    trained: TrainResult, world: ConceptWorld, index: VectorIndex, config: RunConfig
):
    rows = ablate_index_fraction(world, config, params=trained.params, index=index)
    assert [row.fraction for row in rows] == [0.1, 0.3, 0.5, 0.7]
    sizes = [row.index_size for row in rows]
    distances = [row.mean_nn_distance for row in rows]
    assert sizes == sorted(sizes)
    assert all(later <= earlier for earlier, later in zip(distances, distances[1:]))


def test_every_fusion_variant_learns(world: ConceptWorld, index: VectorIndex, config: RunConfig):
    rows = ablate_fusion(world, config, index=index)
    assert [row.variant for row in rows] == list(FusionVariant)
    for row in rows:
        assert np.isfinite(row.final_loss)
        assert row.reduction >= 0.3, row.variant
