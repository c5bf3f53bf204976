"""Retrieval-conditioned training of both diffusion engines."""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch

from retrodiff.config import IndexConfig, RunConfig
from retrodiff.denoiser.condition import ConditionBatch, stack_conditions
from retrodiff.denoiser.config import DenoiserConfig
from retrodiff.denoiser.params import Denoiser, forward, forward_eps, grad, init_params
from retrodiff.diffusion.continuous import PointWorld, eps_loss, make_continuous_schedule
from retrodiff.diffusion.discrete import (
    DiscreteSchedule,
    make_schedule,
    sample_forward,
    vlb_terms,
)
from retrodiff.embedspace import ConceptWorld, GridEncoder
from retrodiff.index.base import VectorIndex
from retrodiff.index.flat import FlatIndex
from retrodiff.index.ivfpq import train_ivfpq
from retrodiff.trainer.retrieval import retrieve_condition

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Corpus:
    """A concept world with its image embeddings and a per-concept train/held-out split.

    Attributes:
        world: The world.
        encoder: The image encoder.
        embeddings: Unit embedding of every sample (S, d).
        train_ids: Sample indices of the training split.
        heldout_ids: Sample indices kept out of training and of the index.
    """

    world: ConceptWorld
    encoder: GridEncoder
    embeddings: np.ndarray
    train_ids: np.ndarray
    heldout_ids: np.ndarray

    def index_ids(self, fraction: float, seed: int) -> np.ndarray:
        """Seeded subset of the training split; smaller fractions nest in larger ones."""
        order = np.random.default_rng([seed, 2]).permutation(self.train_ids)
        count = max(1, math.ceil(fraction * order.size))
        return np.sort(order[:count])


def make_encoder(config: RunConfig) -> GridEncoder:
    world = config.world
    return GridEncoder(
        world.vocab_size, world.height, world.width, world.embed_dim, seed=world.encoder_seed
    )


def prepare_corpus(world: ConceptWorld, config: RunConfig) -> Corpus:
    """Embed every sample and hold out `world.holdout` of each concept, seeded."""
    encoder = make_encoder(config)
    embeddings = encoder.embed_grids(world.tokens)
    rng = np.random.default_rng([config.world.seed, 1])
    train, heldout = [], []
    for concept in range(world.concept_count):
        members = rng.permutation(world.members(concept))
        count = int(config.world.holdout * members.size)
        heldout.append(members[:count])
        train.append(members[count:])
    return Corpus(
        world,
        encoder,
        embeddings,
        np.sort(np.concatenate(train)),
        np.sort(np.concatenate(heldout)),
    )


def build_index(embeddings: np.ndarray, ids: np.ndarray, config: IndexConfig) -> VectorIndex:
    """Index `embeddings[ids]` under their sample ids."""
    ids = np.asarray(ids, dtype=np.int64)
    if config.kind == "flat":
        index = FlatIndex(embeddings.shape[1])
        index.add_many(ids, embeddings[ids])
        return index
    return train_ivfpq(
        embeddings[ids],
        n_cells=config.n_cells or None,
        m=config.m,
        bits=config.bits,
        use_opq=config.opq,
        seed=config.seed,
        ids=ids,
        opq_rounds=config.opq_rounds,
        keep_raw=config.keep_raw,
        nprobe=config.nprobe,
        refine=config.refine,
    )


def build_training_index(corpus: Corpus, config: RunConfig) -> VectorIndex:
    """Index `train.index_fraction` of the training split."""
    ids = corpus.index_ids(config.train.index_fraction, config.world.seed)
    logger.info("Indexing %d of %d training images", ids.size, corpus.train_ids.size)
    return build_index(corpus.embeddings, ids, config.index)


class TrainRecord(NamedTuple):
    """One optimization step.

    Attributes:
        step: Step index, from 0.
        loss: Batch loss.
        part_kl: Batch mean of the variational terms (L_{n-1} or L_0).
        part_aux: Batch mean of the weighted auxiliary x_0 cross-entropy.
    """

    step: int
    loss: float
    part_kl: float
    part_aux: float


class TrainResult(NamedTuple):
    params: Denoiser
    history: list[TrainRecord]


def write_log(history: list[TrainRecord], path: str | Path) -> None:
    """Write one "step loss part_kl part_aux" line per step."""
    with open(path, "w") as f:
        for record in history:
            f.write(f"{record.step} {record.loss!r} {record.part_kl!r} {record.part_aux!r}\n")


def read_log(path: str | Path) -> list[TrainRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        step, loss, kl, aux = line.split()
        records.append(TrainRecord(int(step), float(loss), float(kl), float(aux)))
    return records


def loss_reduction(history: list[TrainRecord], window: int = 100) -> float:
    """Relative drop from the mean loss of the first `window` steps to the last `window`."""
    window = max(1, min(window, len(history) // 2))
    if len(history) < 2:
        return 0.0
    first = np.mean([r.loss for r in history[:window]])
    last = np.mean([r.loss for r in history[-window:]])
    return float(1.0 - last / first)


def condition_cache(
    index: VectorIndex,
    embeddings: np.ndarray,
    ids: np.ndarray,
    k: int,
    exclude_self: bool = False,
) -> ConditionBatch:
    """Retrieval conditions of the images `ids`, each queried with its own embedding."""
    return stack_conditions([
        retrieve_condition(index, embeddings[id_], k, exclude=int(id_) if exclude_self else None)
        for id_ in ids
    ])


def make_optimizer(params: Denoiser, config: RunConfig) -> torch.optim.Optimizer:
    """Plain SGD at a fixed learning rate, or Adam when `train.optimizer` asks for it."""
    if config.train.optimizer == "adam":
        return torch.optim.Adam(params.parameters(), lr=config.train.learning_rate)
    return torch.optim.SGD(params.parameters(), lr=config.train.learning_rate)


def optimize(
    params: Denoiser,
    config: RunConfig,
    generator: torch.Generator,
    batch_loss: Callable[[Denoiser, torch.Generator], tuple[torch.Tensor, float, float]],
) -> list[TrainRecord]:
    """Run `train.steps` optimizer steps.

    `batch_loss` draws a batch with the generator and returns the loss and its two
    logged parts.
    """
    optimizer = make_optimizer(params, config)
    history = []
    for step in range(config.train.steps):
        parts = {}

        def closure(model: Denoiser) -> torch.Tensor:
            loss, parts["kl"], parts["aux"] = batch_loss(model, generator)
            return loss

        loss, grads = grad(params, closure, step)
        optimizer.zero_grad()
        for name, p in params.named_parameters():
            p.grad = grads[name]
        optimizer.step()
        record = TrainRecord(step, float(loss), parts["kl"], parts["aux"])
        history.append(record)
        if (step + 1) % config.train.log_interval == 0:
            logger.info(
                "step %d loss %.6g kl %.6g aux %.6g", step, record.loss, *record[2:]
            )
    return history


def train(
    world: ConceptWorld,
    index: VectorIndex,
    config: RunConfig,
    corpus: Corpus | None = None,
    schedule: DiscreteSchedule | None = None,
) -> TrainResult:
    """Train the grid denoiser on the world's training split.

    Every step draws a batch of training images, takes their cached retrieval
    conditions, nulls each with probability `train.null_dropout`, draws n uniformly from
    {1..N} and x_n from q(x_n | x_0), and minimizes L_0 (n = 1) or L_{n-1} + xi L_x0.

    Args:
        world: The concept world.
        index: Index over (a subset of) the training split, keyed by sample index.
        config: Run configuration.
        corpus: The prepared corpus; derived from `world` and `config` if omitted.
        schedule: The forward chain; built from `config.schedule` if omitted.

    Raises:
        DivergenceError: If a loss is not finite.
    """
    corpus = corpus or prepare_corpus(world, config)
    schedule = schedule or schedule_of(config)
    train_config = config.train
    k = train_config.k if train_config.use_knn else 0
    cache = condition_cache(
        index, corpus.embeddings, corpus.train_ids, k, train_config.exclude_self
    )
    tokens = torch.from_numpy(world.tokens[corpus.train_ids].reshape(len(corpus.train_ids), -1))
    params = init_params(config.denoiser_config(), config.model.seed, config.world.embed_dim)
    generator = torch.Generator().manual_seed(train_config.seed)

    def batch_loss(model: Denoiser, gen: torch.Generator) -> tuple[torch.Tensor, float, float]:
        rows = torch.randint(0, tokens.shape[0], (train_config.batch_size,), generator=gen)
        nulled = torch.rand(train_config.batch_size, generator=gen) < train_config.null_dropout
        cond = cache.select(rows).drop(nulled)
        x0 = tokens[rows]
        n = torch.randint(1, schedule.steps + 1, (train_config.batch_size,), generator=gen)
        xn = sample_forward(schedule, x0, n, gen)
        terms = vlb_terms(schedule, forward(model, xn, n, cond), x0, xn, n, train_config.xi)
        part_kl = float((terms.kl + terms.nll).mean())
        return terms.loss, part_kl, float(train_config.xi * terms.aux.mean())

    logger.info(
        "Training on %d images for %d steps (K=%d)", tokens.shape[0], train_config.steps, k
    )
    history = optimize(params, config, generator, batch_loss)
    return TrainResult(params, history)


def schedule_of(config: RunConfig) -> DiscreteSchedule:
    return make_schedule(
        config.schedule.steps,
        config.world.vocab_size,
        config.schedule.kind,
        config.schedule.slack,
        config.schedule.uniform_ramp,
    )


def model_schedule(config: DenoiserConfig) -> DiscreteSchedule:
    """The forward chain a grid denoiser was trained on, rebuilt from its checkpoint."""
    return make_schedule(
        config.steps, config.vocab_size, config.schedule_kind, config.slack, config.uniform_ramp
    )


def build_point_index(world: PointWorld, config: RunConfig) -> VectorIndex:
    return build_index(world.embeddings, np.arange(world.size), config.index)


def train_continuous(world: PointWorld, index: VectorIndex, config: RunConfig) -> TrainResult:
    """Train the point denoiser on every point of `world` with retrieval conditions.

    Raises:
        DivergenceError: If a loss is not finite.
    """
    train_config = config.train
    schedule = make_continuous_schedule(
        config.schedule.continuous_steps, config.schedule.beta_start, config.schedule.beta_end
    )
    k = train_config.k if train_config.use_knn else 0
    ids = np.arange(world.size)
    cache = condition_cache(index, world.embeddings, ids, k, train_config.exclude_self)
    points = torch.from_numpy(world.batch.points)
    params = init_params(
        config.denoiser_config("eps"), config.model.seed, world.embeddings.shape[1]
    )
    generator = torch.Generator().manual_seed(train_config.seed)

    def batch_loss(model: Denoiser, gen: torch.Generator) -> tuple[torch.Tensor, float, float]:
        rows = torch.randint(0, points.shape[0], (train_config.batch_size,), generator=gen)
        nulled = torch.rand(train_config.batch_size, generator=gen) < train_config.null_dropout
        cond = cache.select(rows).drop(nulled)

        def predict(xn: torch.Tensor, n: torch.Tensor, c: ConditionBatch) -> torch.Tensor:
            return forward_eps(model, xn, n, c)

        loss = eps_loss(predict, schedule, points[rows], cond, gen)
        return loss, float(loss), 0.0

    logger.info("Training on %d points for %d steps (K=%d)", world.size, train_config.steps, k)
    history = optimize(params, config, generator, batch_loss)
    return TrainResult(params, history)
