"""Conditional x_0 predictor over token grids."""

import torch
from torch import nn
from torch.nn import functional as F

from retrodiff.denoiser.condition import (
    Attention,
    ConditionBatch,
    ConditionFuser,
    masked_attention,
)
from retrodiff.denoiser.config import DenoiserConfig


class AdaptiveNorm(nn.Module):
    """Layer normalization with a learned per-step gain and bias."""

    def __init__(self, dim: int, steps: int) -> None:
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False)
        self.gain = nn.Embedding(steps + 1, dim)
        self.bias = nn.Embedding(steps + 1, dim)
        nn.init.zeros_(self.gain.weight)
        nn.init.zeros_(self.bias.weight)

    def forward(self, x: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
        return self.norm(x) * (1.0 + self.gain(n)[:, None]) + self.bias(n)[:, None]


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int) -> None:
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        present = torch.ones(x.shape[:2], dtype=torch.bool)
        return self.out(masked_attention(q, k, v, present, self.heads))


class Block(nn.Module):
    """Self-attention, cross-attention to the context, then a feed-forward layer."""

    def __init__(self, config: DenoiserConfig) -> None:
        super().__init__()
        dim = config.model_dim
        self.norm_self = AdaptiveNorm(dim, config.steps)
        self.self_attention = SelfAttention(dim, config.heads)
        self.norm_cross = AdaptiveNorm(dim, config.steps)
        self.cross_attention = Attention(dim, config.heads)
        self.norm_ff = AdaptiveNorm(dim, config.steps)
        self.ff = nn.Sequential(
            nn.Linear(dim, config.ff_dim), nn.GELU(), nn.Linear(config.ff_dim, dim)
        )

    def forward(
        self,
        h: torch.Tensor,
        n: torch.Tensor,
        context: torch.Tensor,
        present: torch.Tensor,
    ) -> torch.Tensor:
        h = h + self.self_attention(self.norm_self(h, n))
        h = h + self.cross_attention(self.norm_cross(h, n), context, present)
        return h + self.ff(self.norm_ff(h, n))


class GridDenoiser(nn.Module):
    """Predict p(x_0 | x_n, y) for every grid position.

    The output is a float64 tensor of log-probabilities (B, H*W, V+1) whose MASK column
    is -inf.

    Args:
        config: Dimensions; `kind` must be "grid".
    """

    def __init__(self, config: DenoiserConfig) -> None:
        super().__init__()
        if config.kind != "grid":
            raise ValueError(f"GridDenoiser needs a grid config, got kind={config.kind!r}")
        self.config = config
        dim = config.model_dim
        self.token_embedding = nn.Embedding(config.states, dim)
        self.position_embedding = nn.Parameter(torch.randn(config.length, dim) * 0.02)
        if config.manip:
            self.source_embedding = nn.Embedding(config.vocab_size, dim)
        else:
            self.register_module("source_embedding", None)
        self.fuser = ConditionFuser(
            config.fusion,
            config.embed_dim,
            dim,
            config.heads,
            config.neighbors,
            role_code=config.role_code,
        )
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.layers))
        self.final_norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, config.vocab_size)

    def forward(
        self,
        xn: torch.Tensor,
        n: torch.Tensor,
        cond: ConditionBatch,
        source: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Log-probabilities of x_0.

        Args:
            xn: Noisy tokens (B, H*W), MASK allowed.
            n: Steps (B,) in [1, N].
            cond: Conditions of the batch.
            source: Manipulated-grid tokens (B, H*W); required when `config.manip`.

        Raises:
            ValueError: On shape mismatches or a missing manipulation source.
        """
        batch = xn.shape[0]
        if xn.dim() != 2 or xn.shape[1] != self.config.length:
            raise ValueError(
                f"Expected tokens of shape (B, {self.config.length}), got {tuple(xn.shape)}"
            )
        if cond.size != batch:
            raise ValueError(f"Got {cond.size} conditions for {batch} grids")
        n = torch.as_tensor(n, dtype=torch.long).expand(batch)
        if torch.any(n < 0) or torch.any(n > self.config.steps):
            raise ValueError(f"Steps must lie in [0, {self.config.steps}]")
        h = self.token_embedding(xn) + self.position_embedding
        if self.source_embedding is not None:
            if source is None:
                raise ValueError("A manipulation denoiser needs the manipulated grid")
            h = h + self.source_embedding(source)
        context, present = self.fuser(cond)
        for block in self.blocks:
            h = block(h, n, context, present)
        logits = F.log_softmax(self.head(self.final_norm(h)), dim=-1)
        mask_column = logits.new_full((*logits.shape[:-1], 1), -torch.inf)
        return torch.cat([logits, mask_column], dim=-1)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
