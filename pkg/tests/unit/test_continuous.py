"""Test the retrodiff.diffusion.continuous module."""

from pathlib import Path

import numpy as np
import pytest
import torch

from retrodiff.diffusion.continuous import (
    PointBatch,
    cfg_combine_eps,
    eps_loss,
    forward_noise,
    gen_point_world,
    make_continuous_schedule,
    sample_loop_cont,
    step_kernel,
)
from retrodiff.embedspace import is_unit
from retrodiff.errors import ScheduleError, WorldError

STEP_COUNTS = [10, 50, 100, 1000]


@pytest.mark.parametrize("steps", STEP_COUNTS)
def test_schedule_reaches_noise(steps: int):
    schedule = make_continuous_schedule(steps)
    assert torch.all(schedule.alpha_bar[1:] < schedule.alpha_bar[:-1])
    assert schedule.alpha_bar[-1] <= 1e-3
    assert schedule.betas[0] == 0


def test_schedule_rejects_weak_noise():
    with pytest.raises(ScheduleError):
        make_continuous_schedule(100, beta_start=1e-5, beta_end=1e-5)


def test_schedule_rejects_zero_steps():
    with pytest.raises(ScheduleError):
        make_continuous_schedule(0)


def test_terminal_moments():
    schedule = make_continuous_schedule()
    generator = torch.Generator().manual_seed(0)
    x0 = torch.tensor([1.5, -2.0], dtype=torch.float64).expand(100_000, 2)
    eps = torch.randn(x0.shape, generator=generator, dtype=torch.float64)
    xn = forward_noise(schedule, x0, schedule.steps, eps)
    a_bar = schedule.alpha_bar[-1]
    assert torch.allclose(xn.mean(dim=0), a_bar.sqrt() * x0[0], atol=0.02)
    assert torch.allclose(xn.var(dim=0), (1 - a_bar).expand(2), atol=0.02)


def test_step_kernel_composes_to_marginal():
    """Test that iterating single steps gives the closed-form marginal moments."""
    schedule = make_continuous_schedule(50)
    generator = torch.Generator().manual_seed(1)
    x = torch.ones(20_000, 2, dtype=torch.float64)
    for n in range(1, 26):
        eps = torch.randn(x.shape, generator=generator, dtype=torch.float64)
        x = step_kernel(schedule, x, n, eps)
    a_bar = schedule.alpha_bar[25]
    assert float(x.mean()) == pytest.approx(float(a_bar.sqrt()), abs=0.02)
    assert float(x.var()) == pytest.approx(float(1 - a_bar), abs=0.03)


def test_forward_noise_at_step_zero_is_identity():
    schedule = make_continuous_schedule()
    x0 = torch.randn(4, 2, dtype=torch.float64)
    eps = torch.randn(4, 2, dtype=torch.float64)
    assert torch.equal(forward_noise(schedule, x0, 0, eps), x0)


def test_forward_noise_rejects_bad_input():
    schedule = make_continuous_schedule(10)
    x0 = torch.zeros(3, 2, dtype=torch.float64)
    with pytest.raises(ValueError):
        forward_noise(schedule, x0, 11, torch.zeros(3, 2, dtype=torch.float64))
    with pytest.raises(ValueError):
        forward_noise(schedule, x0, 5, torch.zeros(3, 3, dtype=torch.float64))


def test_eps_loss_of_zero_predictor():
    """Test that predicting no noise costs E||eps||^2 = 2 in the plane."""
    schedule = make_continuous_schedule(20)
    x0 = torch.zeros(50_000, 2, dtype=torch.float64)

    def zero(xn: torch.Tensor, n: torch.Tensor, cond: object) -> torch.Tensor:
        return torch.zeros_like(xn)

    loss = eps_loss(zero, schedule, x0, None, torch.Generator().manual_seed(2))
    assert float(loss) == pytest.approx(2.0, abs=0.05)


def test_cfg_with_unit_guidance_is_conditional():
    cond = torch.randn(5, 2, dtype=torch.float64)
    uncond = torch.randn(5, 2, dtype=torch.float64)
    assert torch.equal(cfg_combine_eps(cond, uncond, 1.0), cond)


def test_cfg_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        cfg_combine_eps(torch.zeros(2, 2), torch.zeros(3, 2), 2.0)


def test_unit_guidance_trajectory_is_bitwise_conditional():
    schedule = make_continuous_schedule(20)

    def predictor(xn: torch.Tensor, n: torch.Tensor, cond: float) -> torch.Tensor:
        return torch.tanh(xn * cond + n[:, None] / 20)

    guided = sample_loop_cont(
        predictor, schedule, 0.7, -0.3, 1.0, torch.Generator().manual_seed(3), 8
    )
    plain = sample_loop_cont(
        predictor, schedule, 0.7, -0.3, None, torch.Generator().manual_seed(3), 8
    )
    assert torch.equal(guided, plain)


def test_sampling_with_oracle_noise_recovers_point():
    """Test that a predictor returning the exact noise of a fixed x_0 recovers it."""
    schedule = make_continuous_schedule(50)
    target = torch.tensor([[0.5, -1.0]], dtype=torch.float64)

    def oracle(xn: torch.Tensor, n: torch.Tensor, cond: object) -> torch.Tensor:
        a_bar = schedule.alpha_bar[n][:, None]
        return (xn - a_bar.sqrt() * target) / (1 - a_bar).sqrt()

    points = sample_loop_cont(
        oracle, schedule, None, None, None, torch.Generator().manual_seed(4), 16
    )
    assert torch.allclose(points, target.expand(16, 2), atol=1e-6)


def test_point_world_layout():
    world = gen_point_world(0, concepts=4, per_concept=50)
    assert world.batch.points.shape == (200, 2)
    assert is_unit(world.embeddings)
    assert world.nearest_center(world.centers).tolist() == [0, 1, 2, 3]
    assert np.mean(world.nearest_center(world.batch.points) == world.batch.labels) > 0.95


def test_point_world_query():
    world = gen_point_world(1)
    query = world.query(2, 0.1, seed=[0, 2])
    assert is_unit(query)
    assert np.array_equal(query, world.query(2, 0.1, seed=[0, 2]))
    similarity = world.directions @ query
    assert int(np.argmax(similarity)) == 2


def test_point_world_rejects_empty_world():
    with pytest.raises(WorldError):
        gen_point_world(0, concepts=0)


def test_point_batch_csv_round_trip(tmp_path: Path):
    world = gen_point_world(2, per_concept=5)
    path = tmp_path / "points.csv"
    world.batch.to_csv(path)
    loaded = PointBatch.from_csv(path)
    assert np.array_equal(loaded.points, world.batch.points)
    assert np.array_equal(loaded.labels, world.batch.labels)
    assert path.read_text().splitlines()[0] == "x,y,label"


def test_point_batch_rejects_non_finite_points(tmp_path: Path):
    batch = PointBatch(np.array([[np.nan, 0.0]]), np.array([0]))
    with pytest.raises(ValueError):
        batch.to_csv(tmp_path / "points.csv")
