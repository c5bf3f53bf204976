"""Seeded construction, exact gradients and checkpoints of denoisers."""

import logging
import math
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from pydantic import ValidationError

from retrodiff.binfmt import Reader, Writer
from retrodiff.denoiser.condition import (
    ConditionBatch,
    ConditionSet,
    FusionVariant,
    stack_conditions,
)
from retrodiff.denoiser.config import MAX_PARAMETERS, DenoiserConfig
from retrodiff.denoiser.eps import EpsDenoiser
from retrodiff.denoiser.grid import GridDenoiser
from retrodiff.embedspace import EMBED_DIM
from retrodiff.errors import CheckpointError, DivergenceError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RDCKPT01"

Denoiser = GridDenoiser | EpsDenoiser


def init_params(
    config: DenoiserConfig, seed: int, embed_dim: int = EMBED_DIM
) -> Denoiser:
    """Build a float64 denoiser with seeded initialization.

    Args:
        config: Architecture.
        seed: Initialization seed; the global torch RNG state is left untouched.
        embed_dim: Dimension of the embedding space the conditions come from.

    Raises:
        ValueError: If the config does not match the embedding space or exceeds the
            parameter budget.
    """
    if config.embed_dim != embed_dim:
        raise ValueError(
            f"Config embed_dim={config.embed_dim} does not match the embedding space "
            f"dimension {embed_dim}"
        )
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = GridDenoiser(config) if config.kind == "grid" else EpsDenoiser(config)
    model = model.to(torch.float64)
    count = model.parameter_count()
    if count > MAX_PARAMETERS:
        raise ValueError(f"Denoiser has {count} parameters; the limit is {MAX_PARAMETERS}")
    logger.debug("Initialized %s denoiser with %d parameters", config.kind, count)
    return model


def _batch(cond: ConditionSet | ConditionBatch, size: int) -> ConditionBatch:
    if isinstance(cond, ConditionSet):
        single = stack_conditions([cond])
        return ConditionBatch(
            single.query.expand(size, -1), single.neighbors.expand(size, -1, -1)
        )
    return cond


def _check_variant(params: Denoiser, variant: FusionVariant | None) -> None:
    if variant is not None and FusionVariant(variant) is not params.config.fusion:
        raise ValueError(
            f"Denoiser was built for {params.config.fusion.value}, not {variant}"
        )


def forward(
    params: GridDenoiser,
    xn: torch.Tensor,
    n: torch.Tensor | int,
    cond: ConditionSet | ConditionBatch,
    variant: FusionVariant | None = None,
    source: torch.Tensor | None = None,
) -> torch.Tensor:
    """x_0 log-probabilities (B, H*W, V+1) of the grid head.

    A single `ConditionSet` is shared by the whole batch.
    """
    _check_variant(params, variant)
    xn = torch.as_tensor(xn, dtype=torch.long)
    return params(xn, n, _batch(cond, xn.shape[0]), source)


def forward_eps(
    params: EpsDenoiser,
    points: torch.Tensor,
    n: torch.Tensor | int,
    cond: ConditionSet | ConditionBatch,
    variant: FusionVariant | None = None,
) -> torch.Tensor:
    """Predicted noise (B, 2) of the point head."""
    _check_variant(params, variant)
    points = torch.as_tensor(points, dtype=torch.float64)
    return params(points, n, _batch(cond, points.shape[0]))


def grad(
    params: Denoiser,
    loss_closure: Callable[[Denoiser], torch.Tensor],
    step: int = -1,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Loss and exact gradients of every named parameter.

    Parameters the loss does not depend on get zero gradients.

    Raises:
        DivergenceError: If the loss is not finite.
    """
    loss = loss_closure(params)
    if not torch.isfinite(loss):
        raise DivergenceError(step, float(loss))
    named = list(params.named_parameters())
    if not loss.requires_grad:
        return loss.detach(), {name: torch.zeros_like(p) for name, p in named}
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return loss.detach(), {
        name: torch.zeros_like(p) if g is None else g for (name, p), g in zip(named, grads)
    }


def save_checkpoint(params: Denoiser, path: str | Path) -> None:
    """Write the config echo and every named parameter tensor (RDCKPT01)."""
    state = params.state_dict()
    writer = Writer(CHECKPOINT_MAGIC)
    writer.text(params.config.model_dump_json())
    writer.u32(len(state))
    for name, tensor in state.items():
        writer.text(name)
        writer.u32(tensor.dim(), *tensor.shape)
        writer.array(tensor.detach().cpu().numpy(), np.float64)
    writer.save(path)


def load_checkpoint(path: str | Path) -> Denoiser:
    """Read a checkpoint written by `save_checkpoint`.

    Raises:
        CheckpointError: If the file is malformed or does not match its config.
    """
    try:
        reader = Reader.open(path, CHECKPOINT_MAGIC, CheckpointError)
        config = DenoiserConfig.model_validate_json(reader.text())
        state = {}
        for _ in range(reader.u32()):
            name = reader.text()
            shape = tuple(reader.u32() for _ in range(reader.u32()))
            values = reader.array(np.float64, math.prod(shape))
            state[name] = torch.from_numpy(values.reshape(shape).copy())
        reader.expect_end()
    except (ValidationError, UnicodeDecodeError) as ex:
        raise CheckpointError(f"Malformed checkpoint {path}: {ex}") from ex
    model = init_params(config, seed=0, embed_dim=config.embed_dim)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as ex:
        raise CheckpointError(f"Checkpoint {path} does not match its config: {ex}") from ex
    return model
