"""Inverted-file index with (optionally rotated) product-quantized residuals.

Vectors are partitioned into Voronoi cells by spherical k-means. Within a cell, each
vector is stored as the product-quantization code of its residual to the cell centroid.
With OPQ the residual is rotated by a learned orthogonal matrix before splitting into
subspaces. Search visits the `nprobe` cells nearest to the query and ranks candidates by
asymmetric distance: the uncompressed query against the reconstructed codes.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.linalg import orthogonal_procrustes

from retrodiff.embedspace import Seed
from retrodiff.errors import DuplicateIdError, InsufficientDataError
from retrodiff.index.base import SearchResult, VectorIndex, check_vectors
from retrodiff.index.kmeans import KMEANS_ITERATIONS, kmeans

logger = logging.getLogger(__name__)

DEFAULT_NPROBE = 20
DEFAULT_REFINE = 0
MAX_BITS = 16
OPQ_ROUNDS = 4
OPQ_LLOYD_ITERATIONS = 5


@dataclass(frozen=True, eq=False)
class ProductQuantizer:
    """Per-subspace codebooks.

    Attributes:
        codebooks: Array (m, 2**bits, dim // m).
    """

    codebooks: np.ndarray

    @property
    def m(self) -> int:
        return self.codebooks.shape[0]

    @property
    def ksub(self) -> int:
        return self.codebooks.shape[1]

    @property
    def dsub(self) -> int:
        return self.codebooks.shape[2]

    @property
    def bits(self) -> int:
        return int(math.log2(self.ksub))

    @property
    def code_dtype(self) -> type:
        return np.uint8 if self.bits <= 8 else np.uint16

    def _split(self, vectors: np.ndarray) -> np.ndarray:
        return vectors.reshape(vectors.shape[0], self.m, self.dsub)

    def encode(self, vectors: np.ndarray) -> np.ndarray:
        """Codes (n, m) of the nearest sub-centroid in every subspace."""
        parts = self._split(vectors)
        codes = np.empty((vectors.shape[0], self.m), dtype=self.code_dtype)
        for j in range(self.m):
            book = self.codebooks[j]
            d2 = (
                np.einsum("ij,ij->i", parts[:, j], parts[:, j])[:, None]
                - 2.0 * parts[:, j] @ book.T
                + np.einsum("ij,ij->i", book, book)[None, :]
            )
            codes[:, j] = np.argmin(d2, axis=1)
        return codes

    def decode(self, codes: np.ndarray) -> np.ndarray:
        """Reconstructed vectors (n, m * dsub)."""
        parts = [self.codebooks[j][codes[:, j].astype(np.int64)] for j in range(self.m)]
        return np.concatenate(parts, axis=1)

    def lookup_table(self, query: np.ndarray) -> np.ndarray:
        """Inner products (m, ksub) of each query subvector with each sub-centroid."""
        return np.einsum("jd,jkd->jk", query.reshape(self.m, self.dsub), self.codebooks)

    @classmethod
    def train(
        cls,
        vectors: np.ndarray,
        m: int,
        bits: int,
        seed: Seed = 0,
        iterations: int = KMEANS_ITERATIONS,
        init: "ProductQuantizer | None" = None,
    ) -> "ProductQuantizer":
        """Train one k-means codebook per subspace."""
        dsub = vectors.shape[1] // m
        books = []
        for j in range(m):
            sub = vectors[:, j * dsub : (j + 1) * dsub]
            start = None if init is None else init.codebooks[j]
            result = kmeans(
                sub, 2**bits, seed=[*_seed_list(seed), j], iterations=iterations, init=start
            )
            books.append(result.centroids)
        return cls(np.stack(books))


def _seed_list(seed: Seed) -> list[int]:
    return [seed] if isinstance(seed, int) else list(seed)


class IvfPqIndex(VectorIndex):
    """IVF + PQ/OPQ approximate index.

    Build one with `train_ivfpq`.

    Args:
        centroids: Unit coarse centroids (n_cells, dim).
        pq: Product quantizer of the (rotated) residuals.
        rotation: Orthogonal OPQ rotation (dim, dim), or None.
        keep_raw: Also store the uncompressed vectors for exact re-ranking and lookup.
        nprobe: Default number of cells searched per query.
        refine: Re-rank the best `refine * k` ADC candidates with exact distances;
            0 (the default) ranks and reports by ADC alone. Requires `keep_raw`.
    """

    def __init__(
        self,
        centroids: np.ndarray,
        pq: ProductQuantizer,
        rotation: np.ndarray | None = None,
        keep_raw: bool = True,
        nprobe: int = DEFAULT_NPROBE,
        refine: int = DEFAULT_REFINE,
    ) -> None:
        self.centroids = np.asarray(centroids, dtype=np.float64)
        self.dim = self.centroids.shape[1]
        if self.dim % pq.m:
            raise ValueError(f"PQ subspaces m={pq.m} must divide the dimension {self.dim}")
        self.pq = pq
        self.rotation = rotation
        self.keep_raw = keep_raw
        self.nprobe = nprobe
        self.refine = refine if keep_raw else 0
        self._ids = np.empty(0, dtype=np.int64)
        self._cells = np.empty(0, dtype=np.int64)
        self._codes = np.empty((0, pq.m), dtype=pq.code_dtype)
        self._raw = np.empty((0, self.dim), dtype=np.float64) if keep_raw else None
        self._positions: dict[int, int] = {}

    @property
    def n_cells(self) -> int:
        return self.centroids.shape[0]

    @property
    def m(self) -> int:
        return self.pq.m

    @property
    def bits(self) -> int:
        return self.pq.bits

    @property
    def size(self) -> int:
        return self._ids.shape[0]

    @property
    def ids(self) -> np.ndarray:
        return self._ids.copy()

    @property
    def inverted_lists(self) -> list[list[tuple[int, np.ndarray]]]:
        """Per cell, the (id, code) pairs stored in it."""
        lists: list[list[tuple[int, np.ndarray]]] = [[] for _ in range(self.n_cells)]
        for id_, cell, code in zip(self._ids.tolist(), self._cells.tolist(), self._codes):
            lists[cell].append((id_, code.copy()))
        return lists

    def _rotate(self, residuals: np.ndarray) -> np.ndarray:
        return residuals if self.rotation is None else residuals @ self.rotation

    def _unrotate(self, rotated: np.ndarray) -> np.ndarray:
        return rotated if self.rotation is None else rotated @ self.rotation.T

    def assign_cells(self, vectors: np.ndarray) -> np.ndarray:
        """Nearest coarse cell (maximum inner product) of every row."""
        return np.argmax(vectors @ self.centroids.T, axis=1)

    def encode(self, vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cells and PQ codes of unit vectors (n, dim)."""
        cells = self.assign_cells(vectors)
        codes = self.pq.encode(self._rotate(vectors - self.centroids[cells]))
        return cells, codes

    def reconstruct(self, cells: np.ndarray, codes: np.ndarray) -> np.ndarray:
        return self.centroids[cells] + self._unrotate(self.pq.decode(codes))

    def add(self, id_: int, vector: np.ndarray) -> None:
        self.add_many([id_], np.atleast_2d(vector))

    def add_many(self, ids: Iterable[int], vectors: np.ndarray) -> None:
        """Assign vectors to their nearest cells and store their codes.

        Raises:
            DuplicateIdError: If an id is already stored or repeated.
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
        cells, codes = self.encode(vectors)
        self._positions = positions
        self._ids = np.concatenate([self._ids, ids])
        self._cells = np.concatenate([self._cells, cells])
        self._codes = np.concatenate([self._codes, codes])
        if self._raw is not None:
            self._raw = np.concatenate([self._raw, vectors])

    def nearest_cells(self, query: np.ndarray, nprobe: int) -> np.ndarray:
        """The `nprobe` cells nearest to `query`, nearest first."""
        similarity = self.centroids @ query
        return np.lexsort((np.arange(self.n_cells), -similarity))[:nprobe]

    def search(
        self,
        query: np.ndarray,
        k: int,
        nprobe: int | None = None,
        refine: int | None = None,
    ) -> SearchResult:
        """Rank the stored vectors of the visited cells by asymmetric distance.

        With `refine` > 0 the best `refine * k` candidates are re-ranked against the raw
        vectors and reported with exact distances.
        """
        query = check_vectors(query, self.dim)[0]
        if self.size == 0 or k == 0:
            return SearchResult()
        cells = self.nearest_cells(query, self.nprobe if nprobe is None else nprobe)
        candidates = np.flatnonzero(np.isin(self._cells, cells))
        if candidates.size == 0:
            return SearchResult()
        table = self.pq.lookup_table(self._rotate(query[None, :])[0])
        codes = self._codes[candidates].astype(np.int64)
        residual_dot = table[np.arange(self.m)[None, :], codes].sum(axis=1)
        distances = 1.0 - (self.centroids[self._cells[candidates]] @ query + residual_dot)
        refine = self.refine if refine is None else refine
        if refine > 0 and self._raw is not None:
            order = np.lexsort((self._ids[candidates], distances))[: refine * k]
            candidates = candidates[order]
            distances = 1.0 - self._raw[candidates] @ query
        return SearchResult.rank(self._ids[candidates], distances, k)

    def vectors(self, ids: np.ndarray) -> np.ndarray:
        rows = np.array(
            [self._positions[int(id_)] for id_ in np.atleast_1d(ids)], dtype=np.int64
        )
        if self._raw is not None:
            return self._raw[rows].copy()
        return self.reconstruct(self._cells[rows], self._codes[rows])

    def reconstruction_error(self) -> float:
        """Mean squared reconstruction error over stored vectors (needs raw vectors)."""
        if self._raw is None:
            raise ValueError("Reconstruction error needs the raw vectors (keep_raw=True)")
        if self.size == 0:
            return 0.0
        recon = self.reconstruct(self._cells, self._codes)
        return float(np.mean(np.sum((recon - self._raw) ** 2, axis=1)))

    def contents(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray | None]:
        """Stored ids, cells, codes and raw vectors (None without raw storage)."""
        return self._ids, self._cells, self._codes, self._raw

    def restore(
        self, ids: np.ndarray, cells: np.ndarray, codes: np.ndarray, raw: np.ndarray | None
    ) -> None:
        """Install stored contents verbatim, as read back from disk."""
        self._ids = ids.astype(np.int64)
        self._cells = cells.astype(np.int64)
        self._codes = codes.astype(self.pq.code_dtype)
        self._raw = None if raw is None else raw.astype(np.float64)
        self._positions = {id_: i for i, id_ in enumerate(self._ids.tolist())}
        if len(self._positions) != self.size:
            raise DuplicateIdError(int(self._ids[0]))


def default_cells(n: int) -> int:
    """Standard IVF heuristic: ceil(sqrt(N)) cells."""
    return max(1, math.ceil(math.sqrt(n)))


def train_ivfpq(
    vectors: np.ndarray,
    n_cells: int | None = None,
    m: int = 8,
    bits: int = 8,
    use_opq: bool = False,
    seed: int = 0,
    ids: np.ndarray | None = None,
    opq_rounds: int = OPQ_ROUNDS,
    iterations: int = KMEANS_ITERATIONS,
    keep_raw: bool = True,
    nprobe: int = DEFAULT_NPROBE,
    refine: int = DEFAULT_REFINE,
) -> IvfPqIndex:
    """Train an IVF-PQ index on `vectors` and add all of them.

    Args:
        vectors: Unit training vectors (n, dim).
        n_cells: Number of coarse cells; ceil(sqrt(n)) if omitted.
        m: Number of PQ subspaces; must divide dim.
        bits: Bits per subspace code (2**bits centroids per subspace).
        use_opq: Learn an orthogonal rotation before quantization.
        seed: Seed for every k-means initialization.
        ids: Ids of the vectors; 0..n-1 if omitted.
        opq_rounds: Alternating rotation/codebook rounds when `use_opq`.
        iterations: Lloyd iterations of every k-means run.
        keep_raw: Store raw vectors for exact re-ranking and neighbor lookup.
        nprobe: Default number of cells searched per query.
        refine: Default re-ranking factor; 0 keeps asymmetric distances.

    Returns:
        The trained index holding every training vector.

    Raises:
        InsufficientDataError: If there are fewer vectors than cells or codebook entries.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    n, dim = vectors.shape
    vectors = check_vectors(vectors, dim)
    n_cells = default_cells(n) if n_cells is None else n_cells
    if m <= 0 or dim % m:
        raise ValueError(f"PQ subspaces m={m} must divide the dimension {dim}")
    if not 1 <= bits <= MAX_BITS:
        raise ValueError(f"PQ codes take 1 to {MAX_BITS} bits, got {bits}")
    if n < n_cells:
        raise InsufficientDataError(
            f"Need at least {n_cells} vectors for {n_cells} cells, got {n}"
        )
    if n < 2**bits:
        raise InsufficientDataError(
            f"Need at least {2**bits} vectors for {bits}-bit codebooks, got {n}"
        )

    coarse = kmeans(
        vectors, n_cells, seed=[seed, 0], iterations=iterations, spherical=True
    )
    centroids = coarse.centroids
    logger.info("Trained %d coarse cells on %d vectors", n_cells, n)
    cells = np.argmax(vectors @ centroids.T, axis=1)
    residuals = vectors - centroids[cells]

    pq = ProductQuantizer.train(residuals, m, bits, seed=[seed, 1], iterations=iterations)
    rotation = None
    if use_opq:
        rotation, pq = _train_opq(residuals, pq, opq_rounds, seed)
    logger.info("Trained %s codebooks: m=%d, bits=%d", "OPQ" if use_opq else "PQ", m, bits)

    index = IvfPqIndex(centroids, pq, rotation, keep_raw=keep_raw, nprobe=nprobe, refine=refine)
    index.add_many(np.arange(n) if ids is None else ids, vectors)
    logger.info("Encoded %d vectors", n)
    return index


def _train_opq(
    residuals: np.ndarray, pq: ProductQuantizer, rounds: int, seed: int
) -> tuple[np.ndarray, ProductQuantizer]:
    """Alternate Procrustes rotation updates with warm-started codebook updates.

    The plain PQ solution (identity rotation) is the starting point and the best
    (rotation, codebooks) pair seen is returned, so the result never reconstructs
    worse than plain PQ.
    """
    dim = residuals.shape[1]
    rotation = np.eye(dim)
    best = (_quantization_error(residuals, rotation, pq), rotation, pq)
    logger.debug("OPQ round 0: error %.6g", best[0])
    for round_ in range(1, rounds + 1):
        target = pq.decode(pq.encode(residuals @ rotation))
        rotation, _ = orthogonal_procrustes(residuals, target)
        pq = ProductQuantizer.train(
            residuals @ rotation,
            pq.m,
            pq.bits,
            seed=[seed, 2, round_],
            iterations=OPQ_LLOYD_ITERATIONS,
            init=pq,
        )
        error = _quantization_error(residuals, rotation, pq)
        logger.debug("OPQ round %d: error %.6g", round_, error)
        if error < best[0]:
            best = (error, rotation, pq)
    return best[1], best[2]


def _quantization_error(
    residuals: np.ndarray, rotation: np.ndarray, pq: ProductQuantizer
) -> float:
    rotated = residuals @ rotation
    return float(np.mean(np.sum((pq.decode(pq.encode(rotated)) - rotated) ** 2, axis=1)))


def search_ivfpq(
    index: IvfPqIndex,
    query: np.ndarray,
    k: int,
    nprobe: int = DEFAULT_NPROBE,
    refine: int | None = None,
) -> SearchResult:
    """Approximate `k` nearest neighbors of `query`, searching `nprobe` cells.

    Distances are `1 - <query, reconstruction>` unless `refine` (the index setting if
    omitted) asks for exact re-ranking.
    """
    return index.search(query, k, nprobe=nprobe, refine=refine)
