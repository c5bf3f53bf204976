"""Seeded Lloyd k-means with k-means++ initialization."""

import logging
from typing import NamedTuple

import numpy as np

from retrodiff.embedspace import Seed
from retrodiff.errors import InsufficientDataError

logger = logging.getLogger(__name__)

KMEANS_ITERATIONS = 25
_CHUNK_ROWS = 8192


class KMeansResult(NamedTuple):
    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float


def assign(data: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid (squared L2) of every row of `data`.

    Returns:
        The centroid index and squared distance of each row. Ties go to the lower index.
    """
    centroid_norms = np.einsum("ij,ij->i", centroids, centroids)
    labels = np.empty(data.shape[0], dtype=np.int64)
    distances = np.empty(data.shape[0], dtype=np.float64)
    for start in range(0, data.shape[0], _CHUNK_ROWS):
        block = data[start : start + _CHUNK_ROWS]
        d2 = (
            np.einsum("ij,ij->i", block, block)[:, None]
            - 2.0 * block @ centroids.T
            + centroid_norms[None, :]
        )
        np.maximum(d2, 0.0, out=d2)
        labels[start : start + _CHUNK_ROWS] = np.argmin(d2, axis=1)
        distances[start : start + _CHUNK_ROWS] = d2[
            np.arange(block.shape[0]), labels[start : start + _CHUNK_ROWS]
        ]
    return labels, distances


def kmeans_plus_plus(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Pick `k` initial centroids among the rows of `data`, D^2-weighted."""
    n = data.shape[0]
    chosen = [int(rng.integers(n))]
    closest = np.sum((data - data[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            pick = int(rng.choice(n, p=closest / total))
        else:
            pick = int(rng.integers(n))
        chosen.append(pick)
        np.minimum(closest, np.sum((data - data[pick]) ** 2, axis=1), out=closest)
    return data[chosen].copy()


def kmeans(
    data: np.ndarray,
    k: int,
    seed: Seed = 0,
    iterations: int = KMEANS_ITERATIONS,
    spherical: bool = False,
    init: np.ndarray | None = None,
) -> KMeansResult:
    """Cluster the rows of `data` into `k` clusters.

    Empty clusters are re-seeded to the point farthest from its current centroid.

    Args:
        data: Array of shape (n, dim).
        k: Number of clusters.
        seed: Seed for the k-means++ initialization.
        iterations: Number of Lloyd iterations.
        spherical: Renormalize centroids to unit norm after every update.
        init: Starting centroids (k, dim); skips the k-means++ initialization.

    Returns:
        Centroids, final assignment and inertia (sum of squared distances).

    Raises:
        InsufficientDataError: If there are fewer rows than clusters.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.shape[0] < k:
        raise InsufficientDataError(
            f"Need at least {k} vectors to train {k} clusters, got {data.shape[0]}"
        )
    if init is None:
        centroids = kmeans_plus_plus(data, k, np.random.default_rng(seed))
    else:
        centroids = np.array(init, dtype=np.float64)
    if spherical:
        centroids = _renormalize(centroids)
    labels, distances = assign(data, centroids)
    for _ in range(iterations):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, data)
        filled = counts > 0
        centroids[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            logger.debug("Re-seeding %d empty clusters", empty.size)
            order = np.argsort(-distances, kind="stable")
            centroids[empty] = data[order[: empty.size]]
        if spherical:
            centroids = _renormalize(centroids)
        labels, distances = assign(data, centroids)
    return KMeansResult(centroids, labels, float(distances.sum()))


def _renormalize(centroids: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(centroids, axis=1, keepdims=True)
    return np.where(norms > 0, centroids / np.where(norms > 0, norms, 1.0), centroids)
