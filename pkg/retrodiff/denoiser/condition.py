"""Retrieval conditions and the three ways of fusing them into a context sequence.

A condition is a query embedding plus K neighbor embeddings. Zero vectors stand for
absent entries: the null condition is all zeros, and neighbor slots beyond what the index
could supply are zero-padded. Every fusion variant maps absent entries to zero context,
so a null condition and an explicit all-zero condition are indistinguishable.
"""

from dataclasses import dataclass
from typing import NamedTuple, Sequence

try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__

import numpy as np
import torch
from torch import nn

_PRESENT_TOLERANCE = 1e-6


class FusionVariant(StrEnum):
    """How the query and its neighbors become the cross-attention context."""

    SELF_ATTN_K1 = "self_attn_k1"
    """Self-attention over the K + 1 condition vectors; K + 1 context rows."""
    CROSS_ATTN_POOL = "cross_attn_pool"
    """The query attends over its neighbors; one pooled context row."""
    CONCAT_LINEAR = "concat_linear"
    """A linear map of the concatenated query and (zero-padded) neighbors; one row."""


@dataclass(frozen=True, eq=False)
class ConditionSet:
    """The query embedding and its K retrieved neighbors.

    Attributes:
        query: Unit query embedding (d,), or zeros.
        neighbors: Neighbor embeddings (K, d); zero rows are padding.
        is_null: The null condition: every vector is zero.
        truncated: Fewer than K neighbors were available and the rest is padding.
    """

    query: np.ndarray
    neighbors: np.ndarray
    is_null: bool = False
    truncated: bool = False

    def __post_init__(self) -> None:
        query = np.array(self.query, dtype=np.float64)
        neighbors = np.array(self.neighbors, dtype=np.float64).reshape(-1, query.shape[0])
        if self.is_null:
            query = np.zeros_like(query)
            neighbors = np.zeros_like(neighbors)
        else:
            norms = np.linalg.norm(np.vstack([query[None], neighbors]), axis=1)
            valid = (np.abs(norms - 1.0) <= _PRESENT_TOLERANCE) | (norms == 0)
            if not np.all(valid):
                raise ValueError("Condition vectors must be unit-norm or zero padding")
        query.flags.writeable = False
        neighbors.flags.writeable = False
        object.__setattr__(self, "query", query)
        object.__setattr__(self, "neighbors", neighbors)

    @property
    def k(self) -> int:
        return self.neighbors.shape[0]

    @property
    def dim(self) -> int:
        return self.query.shape[0]

    def null(self) -> "ConditionSet":
        """The null condition of the same shape."""
        return ConditionSet(self.query, self.neighbors, is_null=True)

    def without_neighbors(self) -> "ConditionSet":
        """The query alone (K = 0), as used by the no-kNN setting."""
        return ConditionSet(self.query, self.neighbors[:0], is_null=self.is_null)

    @classmethod
    def null_of(cls, k: int, dim: int) -> "ConditionSet":
        return cls(np.zeros(dim), np.zeros((k, dim)), is_null=True)


class ConditionBatch(NamedTuple):
    """Stacked conditions as float64 tensors.

    Attributes:
        query: (B, d).
        neighbors: (B, K, d).
    """

    query: torch.Tensor
    neighbors: torch.Tensor

    @property
    def size(self) -> int:
        return self.query.shape[0]

    def null(self) -> "ConditionBatch":
        return ConditionBatch(torch.zeros_like(self.query), torch.zeros_like(self.neighbors))

    def select(self, rows: torch.Tensor) -> "ConditionBatch":
        return ConditionBatch(self.query[rows], self.neighbors[rows])

    def drop(self, nulled: torch.Tensor) -> "ConditionBatch":
        """Replace the rows where `nulled` is True by the null condition."""
        keep = (~nulled).to(self.query.dtype)
        return ConditionBatch(self.query * keep[:, None], self.neighbors * keep[:, None, None])


def stack_conditions(conds: Sequence[ConditionSet]) -> ConditionBatch:
    """Stack conditions that share K and d, zero-padding shorter neighbor lists."""
    if not conds:
        raise ValueError("Cannot stack an empty list of conditions")
    k = max(c.k for c in conds)
    dim = conds[0].dim
    neighbors = np.zeros((len(conds), k, dim))
    for i, cond in enumerate(conds):
        neighbors[i, : cond.k] = cond.neighbors
    query = np.stack([c.query for c in conds])
    return ConditionBatch(torch.from_numpy(query), torch.from_numpy(neighbors))


def presence(vectors: torch.Tensor) -> torch.Tensor:
    """Whether each vector along the last axis is non-zero."""
    return (vectors != 0).any(dim=-1)


def masked_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, present: torch.Tensor, heads: int
) -> torch.Tensor:
    """Multi-head scaled dot-product attention ignoring absent keys.

    Args:
        q: Queries (B, T, D).
        k: Keys (B, S, D).
        v: Values (B, S, D).
        present: Key presence (B, S).
        heads: Number of heads; must divide D.

    Returns:
        Attention output (B, T, D). Rows attending over no present key are zero.
    """
    batch, t, dim = q.shape
    s = k.shape[1]
    head_dim = dim // heads

    def split(x: torch.Tensor, length: int) -> torch.Tensor:
        return x.reshape(batch, length, heads, head_dim).transpose(1, 2)

    scores = split(q, t) @ split(k, s).transpose(-1, -2) / head_dim**0.5
    mask = present[:, None, None, :]
    scores = scores.masked_fill(~mask, torch.finfo(scores.dtype).min)
    weights = torch.softmax(scores, dim=-1) * mask
    out = (weights @ split(v, s)).transpose(1, 2).reshape(batch, t, dim)
    return out


class Attention(nn.Module):
    """Multi-head attention with bias-free key, value and output projections."""

    def __init__(self, dim: int, heads: int, source_dim: int | None = None) -> None:
        super().__init__()
        source_dim = source_dim or dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(source_dim, dim, bias=False)
        self.v = nn.Linear(source_dim, dim, bias=False)
        self.out = nn.Linear(dim, dim, bias=False)

    def forward(
        self, x: torch.Tensor, source: torch.Tensor, present: torch.Tensor
    ) -> torch.Tensor:
        attended = masked_attention(
            self.q(x), self.k(source), self.v(source), present, self.heads
        )
        return self.out(attended)


class ConditionFuser(nn.Module):
    """Turn a condition batch into a context sequence for cross-attention.

    Args:
        variant: The fusion variant.
        embed_dim: Dimension d of the condition embeddings.
        model_dim: Width of the context rows.
        heads: Attention heads of the fusion attention layer.
        neighbors: K, the neighbor count `CONCAT_LINEAR` is built for.
        role_code: Add a learned code to the query row under `SELF_ATTN_K1`.
    """

    def __init__(
        self,
        variant: FusionVariant,
        embed_dim: int,
        model_dim: int,
        heads: int,
        neighbors: int,
        role_code: bool = True,
    ) -> None:
        super().__init__()
        self.variant = FusionVariant(variant)
        self.neighbors = neighbors
        if self.variant is FusionVariant.CONCAT_LINEAR:
            self.concat = nn.Linear((neighbors + 1) * embed_dim, model_dim, bias=False)
            return
        self.project = nn.Linear(embed_dim, model_dim, bias=False)
        self.norm = nn.LayerNorm(model_dim, elementwise_affine=False)
        self.attention = Attention(model_dim, heads)
        if self.variant is FusionVariant.SELF_ATTN_K1 and role_code:
            self.role = nn.Parameter(torch.randn(model_dim) * 0.02)
        else:
            self.register_parameter("role", None)

    def forward(self, cond: ConditionBatch) -> tuple[torch.Tensor, torch.Tensor]:
        """Context rows (B, T, D) and their presence (B, T)."""
        if self.variant is FusionVariant.CONCAT_LINEAR:
            return self._concat(cond)
        query = self.project(cond.query)[:, None]
        neighbors = self.project(cond.neighbors)
        query_present = presence(cond.query)[:, None]
        neighbor_present = presence(cond.neighbors)
        if self.variant is FusionVariant.SELF_ATTN_K1:
            if self.role is not None:
                query = query + self.role * query_present[..., None].to(query.dtype)
            tokens = torch.cat([query, neighbors], dim=1)
            present = torch.cat([query_present, neighbor_present], dim=1)
            context = tokens + self.attention(self.norm(tokens), self.norm(tokens), present)
            return context * present[..., None].to(context.dtype), present
        pooled = self.attention(self.norm(query), self.norm(neighbors), neighbor_present)
        present = query_present | neighbor_present.any(dim=1, keepdim=True)
        context = query + pooled
        return context * present[..., None].to(context.dtype), present

    def _concat(self, cond: ConditionBatch) -> tuple[torch.Tensor, torch.Tensor]:
        batch, k, dim = cond.neighbors.shape
        neighbors = cond.neighbors[:, : self.neighbors]
        if k < self.neighbors:
            padding = cond.neighbors.new_zeros(batch, self.neighbors - k, dim)
            neighbors = torch.cat([neighbors, padding], dim=1)
        flat = torch.cat([cond.query, neighbors.reshape(batch, -1)], dim=1)
        present = presence(flat)[:, None]
        return self.concat(flat)[:, None], present


def fuse_condition(fuser: ConditionFuser, cond: ConditionSet | ConditionBatch) -> torch.Tensor:
    """Context sequence of one condition (T, D) or of a batch (B, T, D)."""
    if isinstance(cond, ConditionSet):
        context, _ = fuser(stack_conditions([cond]))
        return context[0]
    context, _ = fuser(cond)
    return context

