"""Desk-scale evaluation: concept accuracy of generated samples and held-out VLB."""

import logging
from dataclasses import dataclass

import numpy as np
import torch

from retrodiff.config import RunConfig
from retrodiff.denoiser.condition import ConditionSet, stack_conditions
from retrodiff.denoiser.eps import EpsDenoiser
from retrodiff.denoiser.grid import GridDenoiser
from retrodiff.denoiser.params import forward, forward_eps
from retrodiff.diffusion.continuous import PointWorld, make_continuous_schedule, sample_loop_cont
from retrodiff.diffusion.discrete import (
    DiscreteSchedule,
    X0Predictor,
    prior_kl,
    sample_forward,
    sample_loop,
    vlb_terms,
)
from retrodiff.embedspace import ConceptWorld, embed_query, nearest_concept
from retrodiff.index.base import VectorIndex
from retrodiff.trainer.loop import Corpus, prepare_corpus, schedule_of
from retrodiff.trainer.retrieval import retrieve_condition

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalReport:
    """Evaluation of one model under one retrieval setting.

    Attributes:
        accuracy: Fraction of samples classified as the concept they were conditioned on.
        per_concept: Accuracy of each concept.
        vlb: Held-out variational bound in nats per position, including L_N; None when
            not computed.
        k: Neighbors per condition (0 for the query alone).
        truncated: Some condition had fewer than `k` neighbors available.
    """

    accuracy: float
    per_concept: tuple[float, ...]
    vlb: float | None = None
    k: int = 0
    truncated: bool = False


def _predictor(params: GridDenoiser | X0Predictor) -> X0Predictor:
    if isinstance(params, GridDenoiser):
        return lambda xn, n, cond: forward(params, xn, n, cond)
    return params


def generate(
    params: GridDenoiser | X0Predictor,
    schedule: DiscreteSchedule,
    cond: ConditionSet,
    guidance: float | None,
    generator: torch.Generator,
    count: int,
    length: int,
) -> np.ndarray:
    """Sample `count` token sequences (count, length) under one shared condition."""
    output = sample_loop(
        _predictor(params), schedule, cond, cond.null(), guidance, generator, count, length
    )
    return output.tokens.numpy()


@torch.no_grad()
def heldout_vlb(
    params: GridDenoiser,
    schedule: DiscreteSchedule,
    corpus: Corpus,
    index: VectorIndex,
    k: int,
    generator: torch.Generator,
) -> float:
    """Monte-Carlo VLB of the held-out split in nats per position.

    Every term L_0 .. L_{N-1} is evaluated at one sampled x_n per image and L_N in
    closed form.
    """
    ids = corpus.heldout_ids
    if ids.size == 0:
        return float("nan")
    world = corpus.world
    x0 = torch.from_numpy(world.tokens[ids].reshape(ids.size, -1))
    cond = stack_conditions([retrieve_condition(index, corpus.embeddings[i], k) for i in ids])
    total = prior_kl(schedule, x0)
    for step in range(1, schedule.steps + 1):
        n = torch.full((ids.size,), step, dtype=torch.long)
        xn = sample_forward(schedule, x0, n, generator)
        terms = vlb_terms(schedule, forward(params, xn, n, cond), x0, xn, n, xi=0.0)
        total = total + terms.kl + terms.nll
    return float(total.mean()) / x0.shape[1]


def evaluate(
    params: GridDenoiser | X0Predictor,
    world: ConceptWorld,
    index: VectorIndex,
    config: RunConfig,
    k: int | None = None,
    corpus: Corpus | None = None,
    with_vlb: bool = True,
) -> EvalReport:
    """Concept accuracy of guided samples and the held-out VLB.

    For each concept the query embedding is drawn with `embed_query` at gap
    `train.gap`, its neighbors are retrieved from `index` and `train.eval_samples`
    grids are sampled with guidance `train.guidance`. A sample is correct when its
    embedding is nearest to the template of the conditioned concept.

    Args:
        params: Trained denoiser, or any x_0 predictor taking `ConditionSet`s.
        world: The concept world.
        index: Index to retrieve from; may differ from the training index.
        config: Run configuration.
        k: Neighbors per condition; `train.k` if omitted, 0 without kNN.
        corpus: The prepared corpus; derived from `world` and `config` if omitted.
        with_vlb: Compute the held-out VLB (needs a `GridDenoiser`).
    """
    corpus = corpus or prepare_corpus(world, config)
    schedule = schedule_of(config)
    train_config = config.train
    if k is None:
        k = train_config.k if train_config.use_knn else 0
    generator = torch.Generator().manual_seed(train_config.seed)
    length = config.world.height * config.world.width
    per_concept = []
    truncated = False
    for concept in range(world.concept_count):
        query = embed_query(
            concept, world, train_config.gap, [train_config.seed, concept], corpus.encoder
        )
        cond = retrieve_condition(index, query, k)
        truncated |= cond.truncated
        tokens = generate(
            params,
            schedule,
            cond,
            train_config.guidance,
            generator,
            train_config.eval_samples,
            length,
        )
        grids = tokens.reshape(-1, config.world.height, config.world.width)
        predicted = nearest_concept(corpus.encoder.embed_grids(grids), world, corpus.encoder)
        per_concept.append(float(np.mean(predicted == concept)))
    vlb = None
    if with_vlb and isinstance(params, GridDenoiser):
        vlb = heldout_vlb(params, schedule, corpus, index, k, generator)
    report = EvalReport(float(np.mean(per_concept)), tuple(per_concept), vlb, k, truncated)
    logger.info("Evaluated K=%d: accuracy %.3f, vlb %s", k, report.accuracy, report.vlb)
    return report


def evaluate_continuous(
    params: EpsDenoiser,
    world: PointWorld,
    index: VectorIndex,
    config: RunConfig,
    k: int | None = None,
) -> EvalReport:
    """Fraction of generated points whose nearest mixture center is the conditioned one."""
    train_config = config.train
    if k is None:
        k = train_config.k if train_config.use_knn else 0
    schedule = make_continuous_schedule(
        config.schedule.continuous_steps, config.schedule.beta_start, config.schedule.beta_end
    )

    def predict(xn: torch.Tensor, n: torch.Tensor, cond: ConditionSet) -> torch.Tensor:
        return forward_eps(params, xn, n, cond)

    generator = torch.Generator().manual_seed(train_config.seed)
    per_concept = []
    truncated = False
    for concept in range(world.concept_count):
        query = world.query(concept, train_config.gap, [train_config.seed, concept])
        cond = retrieve_condition(index, query, k)
        truncated |= cond.truncated
        points = sample_loop_cont(
            predict,
            schedule,
            cond,
            cond.null(),
            train_config.guidance,
            generator,
            train_config.eval_samples,
            params.config.point_dim,
        )
        per_concept.append(float(np.mean(world.nearest_center(points.numpy()) == concept)))
    report = EvalReport(float(np.mean(per_concept)), tuple(per_concept), None, k, truncated)
    logger.info("Evaluated points K=%d: accuracy %.3f", k, report.accuracy)
    return report
