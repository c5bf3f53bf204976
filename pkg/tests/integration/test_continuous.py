"""Train the point denoiser on a Gaussian mixture."""

import numpy as np
import pytest
import torch

from retrodiff.config import RunConfig
from retrodiff.denoiser.condition import ConditionSet
from retrodiff.denoiser.params import forward_eps
from retrodiff.diffusion.continuous import (
    gen_point_world,
    make_continuous_schedule,
    sample_loop_cont,
)
from retrodiff.trainer.evaluate import evaluate_continuous
from retrodiff.trainer.loop import build_point_index, loss_reduction, train_continuous
from retrodiff.trainer.retrieval import retrieve_condition

pytestmark = pytest.mark.slow


def test_samples_land_on_the_conditioned_component():
    world = gen_point_world(0)
    config = RunConfig().with_overrides(
        index={"kind": "flat"}, train={"guidance": 4.0, "learning_rate": 0.02}
    )
    index = build_point_index(world, config)
    result = train_continuous(world, index, config)
    assert loss_reduction(result.history) > 0
    schedule = make_continuous_schedule(
        config.schedule.continuous_steps, config.schedule.beta_start, config.schedule.beta_end
    )

    def predict(xn: torch.Tensor, n: torch.Tensor, cond: ConditionSet) -> torch.Tensor:
        return forward_eps(result.params, xn, n, cond)

    generator = torch.Generator().manual_seed(0)
    inside = []
    for concept in range(world.concept_count):
        cond = retrieve_condition(index, world.query(concept, 0.3, [0, concept]), 10)
        points = sample_loop_cont(predict, schedule, cond, cond.null(), 4.0, generator, 250)
        distance = np.linalg.norm(points.numpy() - world.centers[concept], axis=1)
        inside.append(distance <= 3 * world.spread)
    assert np.mean(np.concatenate(inside)) >= 0.9
    assert evaluate_continuous(result.params, world, index, config).accuracy >= 0.9
