"""Retrieval-conditioned diffusion over token grids and 2-D points"""

from retrodiff.config import RunConfig
from retrodiff.embedspace import ConceptWorld, GridEncoder, TokenGrid, embed_query, gen_world
from retrodiff.trainer import evaluate, retrieve_condition, train

__all__ = [
    "ConceptWorld",
    "GridEncoder",
    "RunConfig",
    "TokenGrid",
    "embed_query",
    "evaluate",
    "gen_world",
    "retrieve_condition",
    "train",
]
