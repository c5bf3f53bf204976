"""Exact and approximate kNN indexes over the joint embedding space."""

from retrodiff.index.base import Hit, SearchResult, VectorIndex
from retrodiff.index.flat import FlatIndex, build_flat, search_flat
from retrodiff.index.io import load_index, save_index
from retrodiff.index.ivfpq import (
    DEFAULT_NPROBE,
    IvfPqIndex,
    ProductQuantizer,
    default_cells,
    search_ivfpq,
    train_ivfpq,
)
from retrodiff.index.kmeans import KMeansResult, kmeans

__all__ = [
    "DEFAULT_NPROBE",
    "FlatIndex",
    "Hit",
    "IvfPqIndex",
    "KMeansResult",
    "ProductQuantizer",
    "SearchResult",
    "VectorIndex",
    "build_flat",
    "default_cells",
    "kmeans",
    "load_index",
    "save_index",
    "search_flat",
    "search_ivfpq",
    "train_ivfpq",
]
