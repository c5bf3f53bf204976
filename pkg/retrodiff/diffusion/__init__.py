"""Discrete (mask-absorbing) and continuous (Gaussian) diffusion engines."""

from retrodiff.diffusion.continuous import (
    ContinuousSchedule,
    PointBatch,
    PointWorld,
    cfg_combine_eps,
    eps_loss,
    forward_noise,
    gen_point_world,
    make_continuous_schedule,
    sample_loop_cont,
    step_kernel,
)
from retrodiff.diffusion.discrete import (
    DiscreteSchedule,
    SampleOutput,
    VlbTerms,
    cfg_combine,
    make_schedule,
    p_theta_step,
    prior_kl,
    q_marginal,
    q_posterior,
    sample_forward,
    sample_loop,
    vlb_terms,
)

__all__ = [
    "ContinuousSchedule",
    "DiscreteSchedule",
    "PointBatch",
    "PointWorld",
    "SampleOutput",
    "VlbTerms",
    "cfg_combine",
    "cfg_combine_eps",
    "eps_loss",
    "forward_noise",
    "gen_point_world",
    "make_continuous_schedule",
    "make_schedule",
    "p_theta_step",
    "prior_kl",
    "q_marginal",
    "q_posterior",
    "sample_forward",
    "sample_loop",
    "sample_loop_cont",
    "step_kernel",
    "vlb_terms",
]
