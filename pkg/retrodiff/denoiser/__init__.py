"""Trainable conditional denoisers and kNN-condition fusion."""

from retrodiff.denoiser.condition import (
    ConditionBatch,
    ConditionFuser,
    ConditionSet,
    FusionVariant,
    fuse_condition,
    stack_conditions,
)
from retrodiff.denoiser.config import DenoiserConfig
from retrodiff.denoiser.eps import EpsDenoiser
from retrodiff.denoiser.grid import GridDenoiser
from retrodiff.denoiser.params import (
    Denoiser,
    forward,
    forward_eps,
    grad,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "ConditionBatch",
    "ConditionFuser",
    "ConditionSet",
    "Denoiser",
    "DenoiserConfig",
    "EpsDenoiser",
    "FusionVariant",
    "GridDenoiser",
    "forward",
    "forward_eps",
    "fuse_condition",
    "grad",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "stack_conditions",
]
