"""Building retrieval conditions from an index."""

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from retrodiff.denoiser.condition import ConditionSet
from retrodiff.embedspace import Scorer
from retrodiff.errors import FilterError
from retrodiff.index.base import VectorIndex

logger = logging.getLogger(__name__)

DEFAULT_POOL = 10_000
QUANTILES = 5


def _condition(query: np.ndarray, neighbors: np.ndarray, k: int) -> ConditionSet:
    padded = np.zeros((k, query.shape[0]))
    padded[: neighbors.shape[0]] = neighbors
    truncated = neighbors.shape[0] < k
    if truncated:
        logger.warning("Index supplied %d of %d requested neighbors", neighbors.shape[0], k)
    return ConditionSet(query, padded, truncated=truncated)


def retrieve_condition(
    index: VectorIndex,
    embedding: np.ndarray,
    k: int,
    exclude: int | None = None,
) -> ConditionSet:
    """The query embedding plus the embeddings of its `k` nearest neighbors.

    Neighbor vectors come from `index.vectors`, so an index storing raw vectors returns
    them exactly. When the index holds fewer than `k` usable entries the rest is zero
    padding and the condition is flagged as truncated.

    Args:
        index: Index to search.
        embedding: Unit query embedding.
        k: Number of neighbors (>= 0).
        exclude: Id to leave out of the neighbor list, such as the query's own image.

    Raises:
        ValueError: If `k` is negative.
    """
    if k < 0:
        raise ValueError(f"Neighbor count must be >= 0, got {k}")
    query = np.asarray(embedding, dtype=np.float64)
    if k == 0:
        return ConditionSet(query, np.zeros((0, query.shape[0])))
    result = index.search(query, k + (exclude is not None))
    ids = [id_ for id_ in result.ids if id_ != exclude][:k]
    neighbors = np.zeros((0, query.shape[0]))
    if ids:
        neighbors = index.vectors(np.array(ids, dtype=np.int64))
    return _condition(query, neighbors, k)


@dataclass(frozen=True)
class ScoreFilter:
    """Keep candidates by score: `low <= s < high`, or one of five equal quantiles.

    Attributes:
        low: Inclusive lower threshold.
        high: Exclusive upper threshold.
        quantile: Quantile 1 (lowest scores) to 5 (highest).
    """

    low: float = -np.inf
    high: float = np.inf
    quantile: int | None = None

    def __post_init__(self) -> None:
        if self.quantile is not None and not 1 <= self.quantile <= QUANTILES:
            raise ValueError(f"Quantile must lie in [1, {QUANTILES}], got {self.quantile}")
        if self.low >= self.high:
            raise ValueError(f"Empty score range [{self.low}, {self.high})")

    @classmethod
    def parse(cls, text: str | None = None, quantile: int | None = None) -> "ScoreFilter":
        """Read thresholds written as "L,H"; either side may be left empty."""
        if not text:
            return cls(quantile=quantile)
        low, sep, high = text.partition(",")
        if not sep:
            raise ValueError(f"Expected a filter of the form 'L,H', got {text!r}")
        return cls(
            float(low) if low.strip() else -np.inf,
            float(high) if high.strip() else np.inf,
            quantile,
        )

    def describe(self) -> str:
        parts = []
        if np.isfinite(self.low) or np.isfinite(self.high):
            parts.append(f"{self.low}<=s<{self.high}")
        if self.quantile is not None:
            parts.append(f"quantile={self.quantile}/{QUANTILES}")
        return ",".join(parts) or "none"

    def keep(self, scores: np.ndarray) -> np.ndarray:
        """Boolean mask of the candidates that pass."""
        keep = (scores >= self.low) & (scores < self.high)
        if self.quantile is not None:
            order = np.lexsort((np.arange(scores.size), scores))
            chosen = np.zeros(scores.size, dtype=bool)
            chosen[np.array_split(order, QUANTILES)[self.quantile - 1]] = True
            keep &= chosen
        return keep


class FilteredCondition(NamedTuple):
    """A score-filtered condition and statistics of the filter.

    Attributes:
        condition: The condition built from the surviving neighbors.
        mean_score: Mean score of the chosen neighbors.
        survivors: Candidates that passed the filter.
        pool: Candidates retrieved before filtering.
    """

    condition: ConditionSet
    mean_score: float
    survivors: int
    pool: int


def filter_candidates(
    index: VectorIndex,
    embedding: np.ndarray,
    k: int,
    scorer: Scorer,
    score_filter: ScoreFilter,
    pool: int = DEFAULT_POOL,
) -> FilteredCondition:
    """Retrieve an oversampled pool, filter it by score and keep the `k` nearest survivors.

    Raises:
        FilterError: If no candidate survives the filter.
    """
    query = np.asarray(embedding, dtype=np.float64)
    result = index.search(query, max(pool, k))
    ids = np.array(result.ids, dtype=np.int64)
    if ids.size == 0:
        raise FilterError(score_filter.describe(), 0)
    vectors = index.vectors(ids)
    scores = np.asarray(scorer.score(vectors))
    keep = score_filter.keep(scores)
    survivors = int(keep.sum())
    if survivors == 0:
        raise FilterError(score_filter.describe(), ids.size)
    # candidates are already ordered by distance
    chosen = np.flatnonzero(keep)[:k]
    logger.info(
        "Filter %s kept %d of %d candidates", score_filter.describe(), survivors, ids.size
    )
    return FilteredCondition(
        _condition(query, vectors[chosen], k),
        float(scores[chosen].mean()) if chosen.size else float("nan"),
        survivors,
        int(ids.size),
    )
