"""Gaussian diffusion on 2-D point clouds with noise prediction."""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Protocol

import numpy as np
import torch

from retrodiff.embedspace import EMBED_DIM, Seed, normalize
from retrodiff.errors import ScheduleError, WorldError

logger = logging.getLogger(__name__)

DEFAULT_STEPS = 100
BETA_START = 1e-4
BETA_END = 0.02
REFERENCE_STEPS = 1000
TERMINAL_ALPHA_BAR = 1e-3


@dataclass(frozen=True, eq=False)
class ContinuousSchedule:
    """Linear-beta DDPM schedule.

    Arrays are indexed by step n = 0..N; step 0 is the identity (beta_0 = 0).

    Attributes:
        steps: Number of steps N.
        betas: Per-step noise variances.
    """

    steps: int
    betas: torch.Tensor
    alphas: torch.Tensor = field(init=False, repr=False)
    alpha_bar: torch.Tensor = field(init=False, repr=False)
    posterior_variance: torch.Tensor = field(init=False, repr=False)

    def __post_init__(self) -> None:
        alphas = 1.0 - self.betas
        alpha_bar = torch.cumprod(alphas, dim=0)
        if torch.any(alpha_bar[1:] >= alpha_bar[:-1]):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        if alpha_bar[-1] > TERMINAL_ALPHA_BAR:
            raise ScheduleError(
                f"alpha_bar_N = {float(alpha_bar[-1]):.3g} exceeds {TERMINAL_ALPHA_BAR}; "
                "use more steps or larger betas"
            )
        variance = torch.zeros_like(self.betas)
        variance[1:] = self.betas[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "posterior_variance", variance)

    def check_step(self, n: torch.Tensor, low: int = 0) -> None:
        if torch.any(n < low) or torch.any(n > self.steps):
            raise ValueError(f"Steps must lie in [{low}, {self.steps}]")


def make_continuous_schedule(
    steps: int = DEFAULT_STEPS,
    beta_start: float = BETA_START,
    beta_end: float = BETA_END,
    reference_steps: int = REFERENCE_STEPS,
) -> ContinuousSchedule:
    """Linear betas from `beta_start` to `beta_end`, given for `reference_steps` steps.

    The endpoints are rescaled by `reference_steps / steps` so that a shorter chain still
    ends close to pure noise.

    Raises:
        ScheduleError: If the chain does not reach alpha_bar_N <= 1e-3.
    """
    if steps < 1:
        raise ScheduleError(f"A schedule needs at least one step, got {steps}")
    scale = reference_steps / steps
    betas = torch.linspace(beta_start * scale, beta_end * scale, steps, dtype=torch.float64)
    betas = torch.cat([torch.zeros(1, dtype=torch.float64), betas.clamp(max=0.999)])
    return ContinuousSchedule(steps, betas)


def _per_row(values: torch.Tensor, n: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return values[n].reshape(-1, *([1] * (like.dim() - 1)))


def forward_noise(
    schedule: ContinuousSchedule, x0: torch.Tensor, n: torch.Tensor | int, eps: torch.Tensor
) -> torch.Tensor:
    """x_n = sqrt(alpha_bar_n) x_0 + sqrt(1 - alpha_bar_n) eps.

    Raises:
        ValueError: If a step lies outside [0, N] or `eps` does not match `x0`.
    """
    if eps.shape != x0.shape:
        raise ValueError(f"Noise shape {tuple(eps.shape)} does not match {tuple(x0.shape)}")
    n = torch.as_tensor(n, dtype=torch.long).expand(x0.shape[0])
    schedule.check_step(n)
    a_bar = _per_row(schedule.alpha_bar, n, x0)
    return a_bar.sqrt() * x0 + (1.0 - a_bar).sqrt() * eps


def step_kernel(
    schedule: ContinuousSchedule, x_prev: torch.Tensor, n: int, eps: torch.Tensor
) -> torch.Tensor:
    """One forward step: x_n = sqrt(alpha_n) x_{n-1} + sqrt(beta_n) eps."""
    schedule.check_step(torch.tensor(n), low=1)
    return schedule.alphas[n].sqrt() * x_prev + schedule.betas[n].sqrt() * eps


class EpsPredictor(Protocol):
    """Anything mapping (x_n, n, conditions) to predicted noise shaped like x_n."""

    def __call__(self, xn: torch.Tensor, n: torch.Tensor, cond: object) -> torch.Tensor: ...


def eps_loss(
    denoiser: EpsPredictor,
    schedule: ContinuousSchedule,
    x0: torch.Tensor,
    cond: object,
    generator: torch.Generator,
) -> torch.Tensor:
    """Monte-Carlo E ||eps - eps_theta(x_n, n, y)||^2 with n ~ Uniform{1..N} per row."""
    n = torch.randint(1, schedule.steps + 1, (x0.shape[0],), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    xn = forward_noise(schedule, x0, n, eps)
    return ((eps - denoiser(xn, n, cond)) ** 2).sum(dim=-1).mean()


def cfg_combine_eps(
    cond_eps: torch.Tensor, uncond_eps: torch.Tensor, guidance: float
) -> torch.Tensor:
    """Guided noise `uncond + guidance * (cond - uncond)`, exact for guidance = 1."""
    if cond_eps.shape != uncond_eps.shape:
        raise ValueError("Guidance inputs differ in shape")
    return (1.0 - guidance) * uncond_eps + guidance * cond_eps


@torch.no_grad()
def sample_loop_cont(
    denoiser: EpsPredictor,
    schedule: ContinuousSchedule,
    cond: object,
    null_cond: object,
    guidance: float | None,
    generator: torch.Generator,
    batch_size: int,
    dim: int = 2,
) -> torch.Tensor:
    """Ancestral DDPM sampling with fixed posterior variance.

    Args:
        denoiser: The noise predictor.
        schedule: The forward chain.
        cond: Conditions for the batch.
        null_cond: The matching null conditions.
        guidance: Guidance scale, or None for purely conditional sampling.
        generator: Torch generator for every draw.
        batch_size: Number of points.
        dim: Point dimension.

    Returns:
        Points of shape (batch_size, dim).
    """
    x = torch.randn((batch_size, dim), generator=generator, dtype=torch.float64)
    for step in range(schedule.steps, 0, -1):
        n = torch.full((batch_size,), step, dtype=torch.long)
        eps = denoiser(x, n, cond)
        if guidance is not None:
            eps = cfg_combine_eps(eps, denoiser(x, n, null_cond), guidance)
        coef = schedule.betas[step] / (1.0 - schedule.alpha_bar[step]).sqrt()
        mean = (x - coef * eps) / schedule.alphas[step].sqrt()
        if step > 1:
            noise = torch.randn(x.shape, generator=generator, dtype=x.dtype)
            x = mean + schedule.posterior_variance[step].sqrt() * noise
        else:
            x = mean
    return x


class PointBatch(NamedTuple):
    """2-D points with concept labels."""

    points: np.ndarray
    labels: np.ndarray

    def to_csv(self, path: str | Path) -> None:
        """Write `x,y,label` rows with a header line."""
        if not np.all(np.isfinite(self.points)):
            raise ValueError("Point batches must be finite")
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["x", "y", "label"], lineterminator="\n")
            writer.writeheader()
            for (x, y), label in zip(self.points.tolist(), self.labels.tolist()):
                writer.writerow({"x": repr(x), "y": repr(y), "label": label})

    @classmethod
    def from_csv(cls, path: str | Path) -> "PointBatch":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        points = np.array([[float(r["x"]), float(r["y"])] for r in rows]).reshape(-1, 2)
        labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
        return cls(points, labels)


@dataclass(frozen=True, eq=False)
class PointWorld:
    """A Gaussian mixture in the plane whose points carry image-like embeddings.

    Attributes:
        centers: Component means (C, 2).
        spread: Component standard deviation.
        batch: The sampled points and their components.
        directions: Unit concept directions (C, d) of the embedding space.
        embeddings: Unit embedding of every point (S, d).
    """

    centers: np.ndarray
    spread: float
    batch: PointBatch
    directions: np.ndarray
    embeddings: np.ndarray

    @property
    def concept_count(self) -> int:
        return self.centers.shape[0]

    @property
    def size(self) -> int:
        return self.batch.points.shape[0]

    def members(self, concept_id: int) -> np.ndarray:
        if not 0 <= concept_id < self.concept_count:
            raise WorldError(f"Unknown concept id {concept_id}; world has {self.concept_count}")
        return np.flatnonzero(self.batch.labels == concept_id)

    def query(self, concept_id: int, gap: float, seed: Seed) -> np.ndarray:
        """Query embedding: mean concept embedding plus a seeded Gaussian of scale `gap`."""
        mean = self.embeddings[self.members(concept_id)].mean(axis=0)
        if gap == 0:
            return normalize(mean)
        rng = np.random.default_rng(seed)
        return normalize(mean + gap * rng.standard_normal(mean.shape[0]))

    def nearest_center(self, points: np.ndarray) -> np.ndarray:
        d2 = ((np.asarray(points)[:, None, :] - self.centers[None]) ** 2).sum(axis=-1)
        return np.argmin(d2, axis=1)


def gen_point_world(
    seed: int,
    concepts: int = 4,
    per_concept: int = 250,
    radius: float = 2.0,
    spread: float = 0.25,
    dim: int = EMBED_DIM,
    embedding_noise: float = 0.1,
) -> PointWorld:
    """Sample a mixture of `concepts` Gaussians with centers evenly spaced on a circle.

    Each point's embedding is its concept direction plus isotropic noise of scale
    `embedding_noise` per coordinate, renormalized.

    Raises:
        WorldError: If `concepts` or `per_concept` is not positive.
    """
    if concepts < 1 or per_concept < 1:
        raise WorldError("A point world needs at least one concept and one point each")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(concepts) / concepts
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = np.repeat(np.arange(concepts), per_concept)
    points = centers[labels] + spread * rng.standard_normal((labels.size, 2))
    directions = normalize(rng.standard_normal((concepts, dim)))
    embeddings = normalize(
        directions[labels] + embedding_noise * rng.standard_normal((labels.size, dim))
    )
    return PointWorld(centers, spread, PointBatch(points, labels), directions, embeddings)
