"""Ablation harnesses: inference-time K, index size and condition fusion."""

import csv
import logging
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from retrodiff.config import RunConfig
from retrodiff.denoiser.condition import FusionVariant
from retrodiff.denoiser.grid import GridDenoiser
from retrodiff.embedspace import ConceptWorld, embed_query
from retrodiff.index.base import VectorIndex
from retrodiff.trainer.evaluate import evaluate
from retrodiff.trainer.loop import (
    Corpus,
    build_index,
    build_training_index,
    loss_reduction,
    prepare_corpus,
    train,
)

logger = logging.getLogger(__name__)


class KRow(NamedTuple):
    """Evaluation at one inference-time K; `k` is None for the query alone."""

    k: int | None
    truncated: bool
    accuracy: float


class FractionRow(NamedTuple):
    fraction: float
    index_size: int
    mean_nn_distance: float
    accuracy: float


class FusionRow(NamedTuple):
    variant: FusionVariant
    initial_loss: float
    final_loss: float
    reduction: float
    accuracy: float


Row = KRow | FractionRow | FusionRow


def write_table(rows: Sequence[Row], path: str | Path) -> None:
    """Write ablation rows as CSV with a header line."""
    if not rows:
        raise ValueError("Cannot write an empty table")
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]._fields), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({
                key: "none" if value is None else getattr(value, "value", value)
                for key, value in row._asdict().items()
            })


def _trained(
    world: ConceptWorld,
    config: RunConfig,
    corpus: Corpus,
    params: GridDenoiser | None,
    index: VectorIndex | None,
) -> tuple[GridDenoiser, VectorIndex]:
    index = index or build_training_index(corpus, config)
    if params is None:
        params = train(world, index, config, corpus=corpus).params
    return params, index


def ablate_k(
    world: ConceptWorld,
    config: RunConfig,
    k_list: Sequence[int] | None = None,
    params: GridDenoiser | None = None,
    index: VectorIndex | None = None,
) -> list[KRow]:
    """Evaluate one model with each inference-time K, then with the query alone.

    The model is trained at `train.k` unless `params` is given. K larger than the index
    is served with every available neighbor and flagged as truncated.
    """
    k_list = config.ablate.k_list if k_list is None else k_list
    corpus = prepare_corpus(world, config)
    params, index = _trained(world, config, corpus, params, index)
    rows = []
    for k in [*k_list, None]:
        report = evaluate(params, world, index, config, k=k or 0, corpus=corpus, with_vlb=False)
        rows.append(KRow(k, report.truncated, report.accuracy))
        logger.info("K=%s: accuracy %.3f", "none" if k is None else k, report.accuracy)
    return rows


def mean_nn_distance(index: VectorIndex, queries: np.ndarray) -> float:
    """Mean cosine distance from each query to its nearest stored vector."""
    return float(np.mean([index.search(q, 1).distances[0] for q in queries]))


def ablate_index_fraction(
    world: ConceptWorld,
    config: RunConfig,
    fractions: Sequence[float] | None = None,
    params: GridDenoiser | None = None,
    index: VectorIndex | None = None,
) -> list[FractionRow]:
    """Evaluate one model against exact indexes over nested subsets of the training split.

    Retrieval quality is the mean 1-NN distance of the concept queries and the held-out
    images; nested subsets make it non-increasing in the fraction.
    """
    fractions = config.ablate.fractions if fractions is None else fractions
    corpus = prepare_corpus(world, config)
    params, index = _trained(world, config, corpus, params, index)
    queries = np.vstack([
        *(
            embed_query(c, world, config.train.gap, [config.train.seed, c], corpus.encoder)
            for c in range(world.concept_count)
        ),
        corpus.embeddings[corpus.heldout_ids],
    ])
    flat = config.index.model_copy(update={"kind": "flat"})
    rows = []
    for fraction in fractions:
        ids = corpus.index_ids(fraction, config.world.seed)
        subset = build_index(corpus.embeddings, ids, flat)
        report = evaluate(params, world, subset, config, corpus=corpus, with_vlb=False)
        distance = mean_nn_distance(subset, queries)
        rows.append(FractionRow(fraction, subset.size, distance, report.accuracy))
        logger.info("fraction %g: 1-NN distance %.4f", fraction, distance)
    return rows


def ablate_fusion(
    world: ConceptWorld, config: RunConfig, index: VectorIndex | None = None
) -> list[FusionRow]:
    """Train and evaluate every fusion variant under identical seeds and budgets."""
    corpus = prepare_corpus(world, config)
    index = index or build_training_index(corpus, config)
    rows = []
    for variant in FusionVariant:
        variant_config = config.with_overrides(train={"fusion": variant})
        result = train(world, index, variant_config, corpus=corpus)
        report = evaluate(
            result.params, world, index, variant_config, corpus=corpus, with_vlb=False
        )
        window = max(1, min(100, len(result.history) // 2))
        losses = [r.loss for r in result.history] or [float("nan")]
        rows.append(FusionRow(
            variant,
            float(np.mean(losses[:window])),
            float(np.mean(losses[-window:])),
            loss_reduction(result.history),
            report.accuracy,
        ))
        logger.info("%s: loss reduction %.3f", variant.value, rows[-1].reduction)
    return rows
