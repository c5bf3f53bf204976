"""Test the retrodiff.denoiser package."""

from pathlib import Path

import numpy as np
import pytest
import torch

from retrodiff.denoiser.condition import (
    ConditionBatch,
    ConditionFuser,
    ConditionSet,
    FusionVariant,
    fuse_condition,
    stack_conditions,
)
from retrodiff.denoiser.config import DenoiserConfig
from retrodiff.denoiser.params import (
    forward,
    forward_eps,
    grad,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from retrodiff.errors import CheckpointError, DivergenceError
from tests.helpers import random_units

EMBED = 8


def make_condition(rng: np.random.Generator, k: int = 3) -> ConditionSet:
    return ConditionSet(random_units(rng, 1, EMBED)[0], random_units(rng, k, EMBED))


def make_batch(rng: np.random.Generator, size: int, k: int = 3) -> ConditionBatch:
    return stack_conditions([make_condition(rng, k) for _ in range(size)])


def finite_difference_check(model: torch.nn.Module, loss, samples: int, seed: int) -> None:
    """Compare autograd gradients of `samples` random parameter entries with central
    differences."""
    _, grads = grad(model, loss)
    named = dict(model.named_parameters())
    rng = np.random.default_rng(seed)
    names = sorted(named)
    h = 1e-6
    for _ in range(samples):
        name = names[rng.integers(len(names))]
        flat = named[name].data.view(-1)
        i = int(rng.integers(flat.numel()))
        original = float(flat[i])
        with torch.no_grad():
            flat[i] = original + h
            plus = float(loss(model))
            flat[i] = original - h
            minus = float(loss(model))
            flat[i] = original
        numeric = (plus - minus) / (2 * h)
        exact = float(grads[name].view(-1)[i])
        assert abs(numeric - exact) <= 1e-4 * max(abs(numeric), abs(exact)) + 1e-8, name


@pytest.mark.parametrize("variant", list(FusionVariant))
def test_grid_forward_is_normalized(grid_config: DenoiserConfig, variant: FusionVariant):
    params = init_params(grid_config.model_copy(update={"fusion": variant}), 0, EMBED)
    rng = np.random.default_rng(0)
    xn = torch.randint(0, 6, (3, 16), generator=torch.Generator().manual_seed(0))
    logp = forward(params, xn, torch.tensor([1, 5, 10]), make_batch(rng, 3))
    assert logp.shape == (3, 16, 6)
    assert logp.dtype == torch.float64
    assert torch.all(logp[..., 5] == -torch.inf)
    assert torch.allclose(logp.exp().sum(dim=-1), torch.ones(3, 16, dtype=torch.float64))


@pytest.mark.parametrize("variant", list(FusionVariant))
def test_null_condition_equals_zero_condition(
    grid_config: DenoiserConfig, variant: FusionVariant
):
    params = init_params(grid_config.model_copy(update={"fusion": variant}), 1, EMBED)
    cond = make_condition(np.random.default_rng(1))
    zero = ConditionSet(np.zeros(EMBED), np.zeros((3, EMBED)))
    xn = torch.full((2, 16), 5)
    assert torch.equal(forward(params, xn, 4, cond.null()), forward(params, xn, 4, zero))


@pytest.mark.parametrize("variant", list(FusionVariant))
def test_null_condition_fuses_to_zero_context(variant: FusionVariant):
    fuser = ConditionFuser(variant, EMBED, 16, 2, 3).to(torch.float64)
    context = fuse_condition(fuser, ConditionSet.null_of(3, EMBED))
    assert torch.all(context == 0)


@pytest.mark.parametrize("variant", list(FusionVariant))
def test_condition_changes_prediction(grid_config: DenoiserConfig, variant: FusionVariant):
    params = init_params(grid_config.model_copy(update={"fusion": variant}), 2, EMBED)
    rng = np.random.default_rng(2)
    xn = torch.full((1, 16), 5)
    a = forward(params, xn, 3, make_condition(rng))
    b = forward(params, xn, 3, make_condition(rng))
    assert not torch.allclose(a, b)


def test_self_attention_context_has_k_plus_one_rows():
    fuser = ConditionFuser(FusionVariant.SELF_ATTN_K1, EMBED, 16, 2, 3).to(torch.float64)
    assert fuse_condition(fuser, make_condition(np.random.default_rng(3))).shape == (4, 16)


def test_concat_linear_pads_short_neighbor_lists(grid_config: DenoiserConfig):
    config = grid_config.model_copy(update={"fusion": FusionVariant.CONCAT_LINEAR})
    params = init_params(config, 3, EMBED)
    rng = np.random.default_rng(4)
    short = ConditionSet(random_units(rng, 1, EMBED)[0], random_units(rng, 1, EMBED))
    padded = ConditionSet(short.query, np.vstack([short.neighbors, np.zeros((2, EMBED))]))
    xn = torch.full((1, 16), 5)
    assert torch.equal(forward(params, xn, 2, short), forward(params, xn, 2, padded))


def test_query_only_model(grid_config: DenoiserConfig):
    params = init_params(grid_config.model_copy(update={"neighbors": 0}), 4, EMBED)
    cond = make_condition(np.random.default_rng(5)).without_neighbors()
    assert forward(params, torch.full((2, 16), 5), 7, cond).shape == (2, 16, 6)


def test_eps_forward_shape(eps_config: DenoiserConfig):
    params = init_params(eps_config, 0, EMBED)
    points = torch.randn(5, 2, dtype=torch.float64)
    out = forward_eps(params, points, torch.arange(1, 6), make_batch(np.random.default_rng(6), 5))
    assert out.shape == (5, 2)
    assert out.dtype == torch.float64


def test_grid_gradients_match_finite_differences(grid_config: DenoiserConfig):
    params = init_params(grid_config, 5, EMBED)
    rng = np.random.default_rng(7)
    generator = torch.Generator().manual_seed(7)
    xn = torch.randint(0, 6, (2, 16), generator=generator)
    target = torch.randint(0, 5, (2, 16), generator=generator)
    cond = make_batch(rng, 2)
    n = torch.tensor([2, 9])

    def loss(model: torch.nn.Module) -> torch.Tensor:
        logp = forward(model, xn, n, cond)
        return -torch.gather(logp, -1, target[..., None]).mean()

    finite_difference_check(params, loss, samples=50, seed=7)


def test_eps_gradients_match_finite_differences(eps_config: DenoiserConfig):
    params = init_params(eps_config, 6, EMBED)
    rng = np.random.default_rng(8)
    points = torch.from_numpy(rng.standard_normal((4, 2)))
    noise = torch.from_numpy(rng.standard_normal((4, 2)))
    cond = make_batch(rng, 4)
    n = torch.tensor([1, 4, 12, 20])

    def loss(model: torch.nn.Module) -> torch.Tensor:
        return ((forward_eps(model, points, n, cond) - noise) ** 2).sum(dim=-1).mean()

    finite_difference_check(params, loss, samples=50, seed=8)


def test_grad_of_constant_loss_is_zero(grid_config: DenoiserConfig):
    params = init_params(grid_config, 0, EMBED)
    loss, grads = grad(params, lambda model: torch.tensor(1.5, dtype=torch.float64))
    assert float(loss) == 1.5
    assert all(torch.all(g == 0) for g in grads.values())


def test_grad_rejects_non_finite_loss(grid_config: DenoiserConfig):
    params = init_params(grid_config, 0, EMBED)
    with pytest.raises(DivergenceError):
        grad(params, lambda model: torch.tensor(float("nan")), step=12)


def test_init_is_seeded(grid_config: DenoiserConfig):
    a = init_params(grid_config, 11, EMBED).state_dict()
    b = init_params(grid_config, 11, EMBED).state_dict()
    c = init_params(grid_config, 12, EMBED).state_dict()
    assert all(torch.equal(a[name], b[name]) for name in a)
    assert not all(torch.equal(a[name], c[name]) for name in a)


def test_init_leaves_global_rng_alone(grid_config: DenoiserConfig):
    state = torch.get_rng_state()
    init_params(grid_config, 3, EMBED)
    assert torch.equal(torch.get_rng_state(), state)


def test_init_rejects_embedding_mismatch(grid_config: DenoiserConfig):
    with pytest.raises(ValueError):
        init_params(grid_config, 0, EMBED + 1)


def test_init_rejects_oversized_model():
    config = DenoiserConfig(model_dim=512, heads=8, ff_dim=2048, layers=4)
    with pytest.raises(ValueError):
        init_params(config, 0)


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        DenoiserConfig(model_dim=30, heads=4)


def test_forward_rejects_other_variant(grid_config: DenoiserConfig):
    params = init_params(grid_config, 0, EMBED)
    cond = make_condition(np.random.default_rng(9))
    with pytest.raises(ValueError):
        forward(params, torch.full((1, 16), 5), 1, cond, variant=FusionVariant.CONCAT_LINEAR)


def test_forward_rejects_bad_step(grid_config: DenoiserConfig):
    params = init_params(grid_config, 0, EMBED)
    cond = make_condition(np.random.default_rng(10))
    with pytest.raises(ValueError):
        forward(params, torch.full((1, 16), 5), 11, cond)


def test_manip_model_needs_source(grid_config: DenoiserConfig):
    params = init_params(grid_config.model_copy(update={"manip": True}), 0, EMBED)
    cond = make_condition(np.random.default_rng(11))
    xn = torch.full((1, 16), 5)
    with pytest.raises(ValueError):
        forward(params, xn, 1, cond)
    source = torch.zeros(1, 16, dtype=torch.long)
    assert forward(params, xn, 1, cond, source=source).shape == (1, 16, 6)


def test_condition_set_rejects_non_unit_vectors():
    with pytest.raises(ValueError):
        ConditionSet(np.full(EMBED, 0.5), np.zeros((2, EMBED)))


def test_stack_conditions_pads_neighbors():
    rng = np.random.default_rng(12)
    batch = stack_conditions([make_condition(rng, 1), make_condition(rng, 3)])
    assert batch.neighbors.shape == (2, 3, EMBED)
    assert torch.all(batch.neighbors[0, 1:] == 0)


def test_condition_batch_drop():
    batch = make_batch(np.random.default_rng(13), 3)
    dropped = batch.drop(torch.tensor([False, True, False]))
    assert torch.all(dropped.query[1] == 0) and torch.all(dropped.neighbors[1] == 0)
    assert torch.equal(dropped.query[0], batch.query[0])


@pytest.mark.parametrize("kind", ["grid", "eps"])
def test_checkpoint_round_trip(
    grid_config: DenoiserConfig, eps_config: DenoiserConfig, kind: str, tmp_path: Path
):
    config = grid_config if kind == "grid" else eps_config
    params = init_params(config, 21, EMBED)
    path = tmp_path / "model.ckpt"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert loaded.config == params.config
    state = params.state_dict()
    assert all(torch.equal(state[name], value) for name, value in loaded.state_dict().items())
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path: Path):
    path = tmp_path / "model.ckpt"
    path.write_bytes(b"RDWORLD1" + bytes(8))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_rejects_truncated_file(grid_config: DenoiserConfig, tmp_path: Path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(init_params(grid_config, 0, EMBED), path)
    path.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
