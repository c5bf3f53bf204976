"""Mask-absorbing discrete diffusion over token grids.

States are the V data tokens plus MASK (id V). One forward step keeps a token with
probability alpha_n + beta_n, moves it to any given data token with probability beta_n
and to MASK with probability gamma_n. MASK is absorbing.

Matrices are row-stochastic: `Q[n][i, j] = q(x_n = j | x_{n-1} = i)` and the cumulative
`M[n] = Q[1] @ ... @ Q[n]` gives `q(x_n = j | x_0 = i)` in row `i`. Index 0 holds the
identity. Distributions over grids ("grid distributions") are float64 torch tensors of
per-position log-probabilities with the state axis last.
"""

import logging
from dataclasses import dataclass, field
from typing import Literal, NamedTuple, Protocol

import numpy as np
import torch
from torch.nn import functional as F

from retrodiff.errors import ImpossibleStateError, ScheduleError

logger = logging.getLogger(__name__)

ScheduleKind = Literal["linear-mask", "absorbing"]
SCHEDULE_KINDS: tuple[str, ...] = ("linear-mask", "absorbing")
DEFAULT_STEPS = 100
TERMINAL_SLACK = 1e-4
UNIFORM_RAMP = 0.1
NORMALIZATION_TOLERANCE = 1e-6


@dataclass(frozen=True, eq=False)
class DiscreteSchedule:
    """Per-step and cumulative transition parameters of the forward chain.

    Arrays are indexed by step n = 0..N; entry 0 is the identity step.

    Attributes:
        steps: Number of diffusion steps N.
        vocab_size: Number of data tokens V.
        kind: Schedule family.
        alpha_bar: Cumulative keep probability.
        beta_bar: Cumulative per-token uniform move probability.
        gamma_bar: Cumulative MASK probability.
        alpha: Per-step keep probability.
        beta: Per-step per-token uniform move probability.
        gamma: Per-step move-to-MASK probability.
    """

    steps: int
    vocab_size: int
    kind: str
    alpha_bar: np.ndarray
    beta_bar: np.ndarray
    gamma_bar: np.ndarray
    alpha: np.ndarray = field(init=False, repr=False)
    beta: np.ndarray = field(init=False, repr=False)
    gamma: np.ndarray = field(init=False, repr=False)
    transitions: torch.Tensor = field(init=False, repr=False)
    cumulative: torch.Tensor = field(init=False, repr=False)

    def __post_init__(self) -> None:
        a_bar, g_bar = self.alpha_bar, self.gamma_bar
        alpha = np.ones_like(a_bar)
        gamma = np.zeros_like(g_bar)
        alpha[1:] = np.divide(
            a_bar[1:], a_bar[:-1], out=np.zeros_like(a_bar[1:]), where=a_bar[:-1] > 0
        )
        gamma[1:] = 1.0 - (1.0 - g_bar[1:]) / (1.0 - g_bar[:-1])
        beta = (1.0 - alpha - gamma) / self.vocab_size
        beta[0] = 0.0
        for name, values in (("alpha", alpha), ("beta", beta), ("gamma", gamma)):
            if np.any(values < -1e-15):
                step = int(np.argmax(values < -1e-15))
                raise ScheduleError(f"Infeasible schedule: {name}_{step} = {values[step]:.3g}")
            values = np.clip(values, 0.0, 1.0)
            values.flags.writeable = False
            object.__setattr__(self, name, values)
        object.__setattr__(self, "transitions", self._stack(self.alpha, self.beta, self.gamma))
        object.__setattr__(
            self, "cumulative", self._stack(self.alpha_bar, self.beta_bar, self.gamma_bar)
        )

    def _stack(self, keep: np.ndarray, move: np.ndarray, mask: np.ndarray) -> torch.Tensor:
        """Transition matrices (N+1, V+1, V+1) from (keep, move, mask) probabilities."""
        size = self.vocab_size + 1
        eye = np.eye(self.vocab_size)
        mats = np.zeros((self.steps + 1, size, size))
        mats[:, : self.vocab_size, : self.vocab_size] = (
            keep[:, None, None] * eye + move[:, None, None]
        )
        mats[:, : self.vocab_size, self.vocab_size] = mask[:, None]
        mats[:, self.vocab_size, self.vocab_size] = 1.0
        return torch.from_numpy(mats)

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    @property
    def states(self) -> int:
        """Number of states V + 1."""
        return self.vocab_size + 1

    def check_step(self, n: int, low: int = 0) -> None:
        if not low <= n <= self.steps:
            raise ValueError(f"Step {n} outside [{low}, {self.steps}]")

    def prior(self) -> np.ndarray:
        """Terminal prior p(x_N): MASK with probability gamma_bar_N, the rest uniform."""
        n = self.steps
        probs = np.full(self.states, self.alpha_bar[n] / self.vocab_size + self.beta_bar[n])
        probs[self.mask_id] = self.gamma_bar[n]
        return probs

    def dump(self) -> str:
        """Audit table of every step, 12 significant digits."""
        header = "n alpha beta gamma alpha_bar beta_bar gamma_bar"
        rows = [header]
        for n in range(self.steps + 1):
            values = (
                self.alpha[n],
                self.beta[n],
                self.gamma[n],
                self.alpha_bar[n],
                self.beta_bar[n],
                self.gamma_bar[n],
            )
            rows.append(f"{n} " + " ".join(f"{v:.12g}" for v in values))
        return "\n".join(rows) + "\n"


def make_schedule(
    steps: int = DEFAULT_STEPS,
    vocab_size: int = 10,
    kind: ScheduleKind = "linear-mask",
    slack: float = TERMINAL_SLACK,
    uniform_ramp: float = UNIFORM_RAMP,
) -> DiscreteSchedule:
    """Build a mask-absorbing schedule.

    "linear-mask": gamma_bar_n = n/N (1 - slack), the uniform-move share of the unmasked
    mass ramps linearly to `uniform_ramp` and alpha_bar_n is the remainder. "absorbing" is
    the same without uniform moves.

    Args:
        steps: Number of steps N (>= 1).
        vocab_size: Number of data tokens V.
        kind: Schedule family.
        slack: Probability of not being masked at step N.
        uniform_ramp: Final share of unmasked mass spread uniformly.

    Raises:
        ScheduleError: On an unknown kind or infeasible parameters.
    """
    if steps < 1:
        raise ScheduleError(f"A schedule needs at least one step, got {steps}")
    if vocab_size < 1:
        raise ScheduleError(f"Vocabulary size must be positive, got {vocab_size}")
    if kind not in SCHEDULE_KINDS:
        raise ScheduleError(f"Unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    if not 0 < slack < 1:
        raise ScheduleError(f"Terminal slack must lie in (0, 1), got {slack}")
    ramp = uniform_ramp if kind == "linear-mask" else 0.0
    if not 0 <= ramp <= 1:
        raise ScheduleError(f"Uniform ramp must lie in [0, 1], got {uniform_ramp}")
    t = np.arange(steps + 1, dtype=np.float64) / steps
    gamma_bar = t * (1.0 - slack)
    unmasked = 1.0 - gamma_bar
    alpha_bar = unmasked * (1.0 - ramp * t)
    beta_bar = unmasked * ramp * t / vocab_size
    for values in (alpha_bar, beta_bar, gamma_bar):
        values.flags.writeable = False
    return DiscreteSchedule(steps, vocab_size, kind, alpha_bar, beta_bar, gamma_bar)


def q_marginal(schedule: DiscreteSchedule, x0: int, n: int) -> np.ndarray:
    """Closed-form q(x_n | x_0) over the V + 1 states.

    Raises:
        ValueError: If `x0` is MASK or out of range, or `n` is outside [0, N].
    """
    if not 0 <= x0 < schedule.vocab_size:
        raise ValueError(f"x_0 must be a data token in [0, {schedule.vocab_size}), got {x0}")
    schedule.check_step(n)
    probs = np.full(schedule.states, schedule.beta_bar[n])
    probs[x0] += schedule.alpha_bar[n]
    probs[schedule.mask_id] = schedule.gamma_bar[n]
    return probs


def sample_forward(
    schedule: DiscreteSchedule,
    x0: torch.Tensor,
    n: torch.Tensor | int,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Draw x_n ~ q(x_n | x_0) independently per position.

    Args:
        schedule: The forward chain.
        x0: Data tokens of shape (B, L) or (L,).
        n: Step per batch element (shape (B,)) or a single step.
        generator: Torch generator for the draw.

    Returns:
        Token tensor shaped like `x0`.
    """
    x0 = torch.as_tensor(x0, dtype=torch.long)
    squeeze = x0.dim() == 1
    if squeeze:
        x0 = x0[None]
    n = torch.as_tensor(n, dtype=torch.long).expand(x0.shape[0])
    probs = schedule.cumulative[n][torch.arange(x0.shape[0])[:, None], x0]
    flat = probs.reshape(-1, schedule.states)
    draws = torch.multinomial(flat, 1, generator=generator).reshape(x0.shape)
    return draws[0] if squeeze else draws


def q_posterior(schedule: DiscreteSchedule, xn: int, x0: int, n: int) -> np.ndarray:
    """q(x_{n-1} | x_n, x_0) by Bayes rule over the V + 1 states.

    At n = 1 this is a point mass on `x0`.

    Raises:
        ImpossibleStateError: If (x_n, x_0, n) has zero joint probability.
    """
    schedule.check_step(n, low=1)
    if not 0 <= x0 < schedule.vocab_size:
        raise ValueError(f"x_0 must be a data token in [0, {schedule.vocab_size}), got {x0}")
    numerator = (
        schedule.transitions[n][:, xn].numpy() * schedule.cumulative[n - 1][x0].numpy()
    )
    total = numerator.sum()
    if total <= 0:
        raise ImpossibleStateError(xn, x0, n)
    return numerator / total


def _gather_columns(mats: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """`out[b, l, k] = mats[b, k, tokens[b, l]]` for mats (B, S, S), tokens (B, L)."""
    states = mats.shape[-1]
    index = tokens[..., None].expand(*tokens.shape, states)
    return torch.gather(mats.transpose(1, 2), 1, index)


def _safe_log(probs: torch.Tensor) -> torch.Tensor:
    positive = probs > 0
    return torch.where(positive, torch.log(torch.where(positive, probs, 1.0)), -torch.inf)


def check_normalized(logp: torch.Tensor, tol: float = NORMALIZATION_TOLERANCE) -> None:
    """Raise ValueError unless every position's log-sum-exp is 0 within `tol`."""
    totals = torch.logsumexp(logp, dim=-1)
    if not torch.all(torch.abs(totals) <= tol):
        raise ValueError("Grid distribution is not normalized")


def _batched(
    logp: torch.Tensor, xn: torch.Tensor, n: torch.Tensor | int
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, bool]:
    squeeze = logp.dim() == 2
    if squeeze:
        logp, xn = logp[None], xn[None]
    n = torch.as_tensor(n, dtype=torch.long).expand(logp.shape[0])
    return logp, torch.as_tensor(xn, dtype=torch.long), n, squeeze


def p_theta_step(
    schedule: DiscreteSchedule,
    x0_logp: torch.Tensor,
    xn: torch.Tensor,
    n: torch.Tensor | int,
    validate: bool = True,
) -> torch.Tensor:
    """Reverse step p(x_{n-1} | x_n) marginalizing the posterior over predicted x_0.

    `p(k) = sum_x q(x_{n-1} = k | x_n, x_0 = x) p(x_0 = x)`, evaluated in probability space.
    Predicted states inconsistent with x_n contribute nothing and the result is
    renormalized.

    Args:
        schedule: The forward chain.
        x0_logp: Predicted x_0 log-probabilities (B, L, V+1) or (L, V+1), no MASK mass.
        xn: Current tokens (B, L) or (L,).
        n: Current step per batch element, in [1, N].
        validate: Check that `x0_logp` is normalized.

    Returns:
        Log-probabilities of x_{n-1}, shaped like `x0_logp`.

    Raises:
        ValueError: If `x0_logp` is not normalized or puts mass on MASK.
    """
    if validate:
        check_normalized(x0_logp)
        if torch.any(x0_logp[..., schedule.mask_id] > -torch.inf):
            raise ValueError("Predicted x_0 distribution must not put mass on MASK")
    logp, xn, n, squeeze = _batched(x0_logp, xn, n)
    if torch.any(n < 1) or torch.any(n > schedule.steps):
        raise ValueError(f"Reverse steps must lie in [1, {schedule.steps}]")
    to_xn = _gather_columns(schedule.transitions[n], xn)
    reach = _gather_columns(schedule.cumulative[n], xn)
    possible = reach > 0
    weights = torch.where(possible, logp.exp() / torch.where(possible, reach, 1.0), 0.0)
    probs = to_xn * torch.bmm(weights, schedule.cumulative[n - 1])
    probs = probs / probs.sum(dim=-1, keepdim=True).clamp_min(torch.finfo(probs.dtype).tiny)
    out = _safe_log(probs)
    return out[0] if squeeze else out


def posterior_probs(
    schedule: DiscreteSchedule, x0: torch.Tensor, xn: torch.Tensor, n: torch.Tensor
) -> torch.Tensor:
    """Batched q(x_{n-1} | x_n, x_0) probabilities (B, L, V+1)."""
    to_xn = _gather_columns(schedule.transitions[n], xn)
    prev = schedule.cumulative[n - 1][torch.arange(x0.shape[0])[:, None], x0]
    numerator = to_xn * prev
    totals = numerator.sum(dim=-1, keepdim=True)
    if torch.any(totals <= 0):
        b, l = (int(i) for i in torch.nonzero(totals[..., 0] <= 0)[0])
        raise ImpossibleStateError(int(xn[b, l]), int(x0[b, l]), int(n[b]))
    return numerator / totals


class VlbTerms(NamedTuple):
    """Per-example loss parts of a batch.

    Attributes:
        loss: Batch-mean training loss.
        kl: Per-example KL term L_{n-1} (zero where n = 1).
        nll: Per-example reconstruction term L_0 (zero where n > 1).
        aux: Per-example auxiliary cross-entropy on x_0 (zero where n = 1), unweighted.
    """

    loss: torch.Tensor
    kl: torch.Tensor
    nll: torch.Tensor
    aux: torch.Tensor


def vlb_terms(
    schedule: DiscreteSchedule,
    x0_logp: torch.Tensor,
    x0: torch.Tensor,
    xn: torch.Tensor,
    n: torch.Tensor | int,
    xi: float,
) -> VlbTerms:
    """Training loss: L_0 where n = 1, otherwise L_{n-1} + xi * L_x0.

    Terms are summed over grid positions and the loss is averaged over the batch.

    Args:
        schedule: The forward chain.
        x0_logp: Predicted x_0 log-probabilities (B, L, V+1).
        x0: Clean tokens (B, L).
        xn: Noisy tokens (B, L) drawn from q(x_n | x_0).
        n: Step per batch element, in [1, N].
        xi: Weight of the auxiliary x_0 cross-entropy.
    """
    logp, xn, n, squeeze = _batched(x0_logp, xn, n)
    x0 = torch.as_tensor(x0, dtype=torch.long)
    if squeeze:
        x0 = x0[None]
    model = p_theta_step(schedule, logp, xn, n, validate=False)
    target = posterior_probs(schedule, x0, xn, n)
    support = target > 0
    log_target = torch.log(torch.where(support, target, 1.0))
    log_model = torch.where(support, model, 0.0)
    kl_positions = torch.where(support, target * (log_target - log_model), 0.0).sum(dim=-1)
    kl = kl_positions.sum(dim=-1)
    nll = -torch.gather(model, -1, x0[..., None])[..., 0].sum(dim=-1)
    aux = -torch.gather(logp, -1, x0[..., None])[..., 0].sum(dim=-1)
    first = n == 1
    kl = torch.where(first, 0.0, kl)
    nll = torch.where(first, nll, 0.0)
    aux = torch.where(first, 0.0, aux)
    loss = (kl + nll + xi * aux).mean()
    return VlbTerms(loss, kl, nll, aux)


def prior_kl(schedule: DiscreteSchedule, x0: torch.Tensor) -> torch.Tensor:
    """L_N = KL(q(x_N | x_0) || p(x_N)) summed over positions, per example (B,)."""
    x0 = torch.as_tensor(x0, dtype=torch.long)
    if x0.dim() == 1:
        x0 = x0[None]
    q = schedule.cumulative[schedule.steps][x0]
    prior = torch.from_numpy(schedule.prior())
    support = q > 0
    ratio = torch.where(support, q / torch.where(support, prior, 1.0), 1.0)
    return torch.where(support, q * torch.log(ratio), 0.0).sum(dim=(-1, -2))


def cfg_combine(
    cond_logp: torch.Tensor, uncond_logp: torch.Tensor, guidance: float
) -> torch.Tensor:
    """Classifier-free guidance on log-probabilities, renormalized per position.

    Computes `uncond + guidance * (cond - uncond)` as `(1 - guidance) * uncond +
    guidance * cond`, so `guidance = 1` returns the conditional distribution. States
    impossible under either input stay impossible.

    Raises:
        ValueError: If the shapes differ.
    """
    if cond_logp.shape != uncond_logp.shape:
        raise ValueError(
            f"Guidance inputs differ in shape: {tuple(cond_logp.shape)} vs "
            f"{tuple(uncond_logp.shape)}"
        )
    finite = torch.isfinite(cond_logp) & torch.isfinite(uncond_logp)
    cond = torch.where(finite, cond_logp, 0.0)
    uncond = torch.where(finite, uncond_logp, 0.0)
    combined = torch.where(finite, (1.0 - guidance) * uncond + guidance * cond, -torch.inf)
    return F.log_softmax(combined, dim=-1)


class X0Predictor(Protocol):
    """Anything mapping (x_n, n, conditions) to x_0 log-probabilities (B, L, V+1)."""

    def __call__(self, xn: torch.Tensor, n: torch.Tensor, cond: object) -> torch.Tensor: ...


class SampleOutput(NamedTuple):
    tokens: torch.Tensor
    residual_masks: int


@torch.no_grad()
def sample_loop(
    denoiser: X0Predictor,
    schedule: DiscreteSchedule,
    cond: object,
    null_cond: object,
    guidance: float | None,
    generator: torch.Generator,
    batch_size: int,
    length: int,
) -> SampleOutput:
    """Ancestral sampling from all-MASK at step N down to x_0.

    Every step runs the denoiser on the condition and, when guided, on the null
    condition, combines the two with `cfg_combine`, marginalizes the posterior and draws
    x_{n-1}. MASK tokens left at the end are replaced by the most likely token.

    Args:
        denoiser: The x_0 predictor.
        schedule: The forward chain.
        cond: Conditions for the batch.
        null_cond: The matching null conditions.
        guidance: Guidance scale, or None for purely conditional sampling.
        generator: Torch generator for every draw.
        batch_size: Number of grids.
        length: Tokens per grid.

    Returns:
        Tokens (B, L) free of MASK and the number of replaced MASK tokens.
    """
    x = torch.full((batch_size, length), schedule.mask_id, dtype=torch.long)
    logp = None
    for step in range(schedule.steps, 0, -1):
        n = torch.full((batch_size,), step, dtype=torch.long)
        logp = denoiser(x, n, cond)
        if guidance is not None:
            logp = cfg_combine(logp, denoiser(x, n, null_cond), guidance)
        probs = p_theta_step(schedule, logp, x, n, validate=False).exp()
        x = torch.multinomial(probs.reshape(-1, schedule.states), 1, generator=generator)
        x = x.reshape(batch_size, length)
    residual = x == schedule.mask_id
    count = int(residual.sum())
    if count:
        logger.debug("Replacing %d residual MASK tokens", count)
        x = torch.where(residual, logp.argmax(dim=-1), x)
    return SampleOutput(x, count)
