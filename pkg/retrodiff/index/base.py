"""Search results and the interface shared by every vector index."""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

UNIT_CHECK_TOLERANCE = 1e-6


class Hit(NamedTuple):
    """A single search hit."""

    id: int
    distance: float


@dataclass(frozen=True)
class SearchResult:
    """Hits of a k-nearest-neighbor search.

    Attributes:
        hits: Hits sorted by distance, ties broken by the lower id.
    """

    hits: tuple[Hit, ...] = ()

    def __post_init__(self) -> None:
        keys = [(hit.distance, hit.id) for hit in self.hits]
        if keys != sorted(keys):
            raise ValueError("Search hits must be sorted by (distance, id)")

    def __len__(self) -> int:
        return len(self.hits)

    def __iter__(self) -> Iterator[Hit]:
        return iter(self.hits)

    @property
    def ids(self) -> list[int]:
        return [hit.id for hit in self.hits]

    @property
    def distances(self) -> list[float]:
        return [hit.distance for hit in self.hits]

    @classmethod
    def rank(cls, ids: np.ndarray, distances: np.ndarray, k: int) -> "SearchResult":
        """Keep the `k` smallest distances, lower id first on ties."""
        if k < 0:
            raise ValueError(f"k must be >= 0, got {k}")
        distances = np.clip(distances, 0.0, 2.0)
        order = np.lexsort((ids, distances))[:k]
        return cls(tuple(Hit(int(ids[i]), float(distances[i])) for i in order))


def check_vectors(vectors: np.ndarray, dim: int) -> np.ndarray:
    """Validate a (n, dim) block of unit vectors and return it as float64."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if vectors.ndim != 2 or vectors.shape[1] != dim:
        raise ValueError(f"Expected vectors of dimension {dim}, got shape {vectors.shape}")
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_CHECK_TOLERANCE):
        raise ValueError("Index vectors and queries must be unit-norm")
    return vectors


class VectorIndex(ABC):
    """A cosine-distance kNN index over unit vectors keyed by integer ids."""

    dim: int

    @property
    @abstractmethod
    def size(self) -> int:
        """Number of stored vectors."""

    @property
    @abstractmethod
    def ids(self) -> np.ndarray:
        """Stored ids in insertion order."""

    @abstractmethod
    def add(self, id_: int, vector: np.ndarray) -> None:
        """Insert one vector.

        Raises:
            DuplicateIdError: If `id_` is already stored.
        """

    @abstractmethod
    def search(self, query: np.ndarray, k: int) -> SearchResult:
        """Return the `k` nearest stored vectors to the unit vector `query`."""

    @abstractmethod
    def vectors(self, ids: np.ndarray) -> np.ndarray:
        """Stored (or reconstructed) vectors for `ids`, shape (len(ids), dim)."""

    def __len__(self) -> int:
        return self.size
