"""Exact brute-force kNN index."""

from typing import Iterable

import numpy as np

from retrodiff.embedspace import EMBED_DIM
from retrodiff.errors import DuplicateIdError
from retrodiff.index.base import SearchResult, VectorIndex, check_vectors


class FlatIndex(VectorIndex):
    """Exact cosine-distance search by a full scan.

    Args:
        dim: Vector dimension.
    """

    def __init__(self, dim: int = EMBED_DIM) -> None:
        self.dim = dim
        self._ids = np.empty(0, dtype=np.int64)
        self._vectors = np.empty((0, dim), dtype=np.float64)
        self._positions: dict[int, int] = {}

    @property
    def size(self) -> int:
        return self._ids.shape[0]

    @property
    def ids(self) -> np.ndarray:
        return self._ids.copy()

    @property
    def matrix(self) -> np.ndarray:
        """All stored vectors in insertion order, read-only view."""
        view = self._vectors.view()
        view.flags.writeable = False
        return view

    def add(self, id_: int, vector: np.ndarray) -> None:
        self.add_many([id_], np.atleast_2d(vector))

    def add_many(self, ids: Iterable[int], vectors: np.ndarray) -> None:
        """Insert several vectors at once.

        Raises:
            DuplicateIdError: If an id is already stored or repeated in `ids`.
        """
        ids = np.asarray(list(ids), dtype=np.int64)
        if ids.size == 0:
            return
        vectors = check_vectors(vectors, self.dim)
        if vectors.shape[0] != ids.shape[0]:
            raise ValueError("Got a different number of ids and vectors")
        positions = dict(self._positions)
        for offset, id_ in enumerate(ids.tolist()):
            if id_ in positions:
                raise DuplicateIdError(id_)
            positions[id_] = self.size + offset
        self._positions = positions
        self._ids = np.concatenate([self._ids, ids])
        self._vectors = np.concatenate([self._vectors, vectors])

    def search(self, query: np.ndarray, k: int) -> SearchResult:
        query = check_vectors(query, self.dim)[0]
        if self.size == 0:
            return SearchResult()
        distances = 1.0 - self._vectors @ query
        return SearchResult.rank(self._ids, distances, k)

    def vectors(self, ids: np.ndarray) -> np.ndarray:
        rows = [self._positions[int(id_)] for id_ in np.atleast_1d(ids)]
        return self._vectors[rows].copy()


def build_flat(
    pairs: Iterable[tuple[int, np.ndarray]], dim: int = EMBED_DIM
) -> FlatIndex:
    """Build a flat index holding exactly `pairs`.

    Raises:
        DuplicateIdError: If an id occurs twice.
    """
    pairs = list(pairs)
    index = FlatIndex(dim)
    if pairs:
        ids, vectors = zip(*pairs)
        index.add_many(ids, np.stack(vectors))
    return index


def search_flat(index: FlatIndex, query: np.ndarray, k: int) -> SearchResult:
    """Exact `k` nearest neighbors of `query`."""
    return index.search(query, k)
