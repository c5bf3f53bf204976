"""Conditional noise predictor for 2-D points."""

import torch
from torch import nn

from retrodiff.denoiser.condition import ConditionBatch, ConditionFuser
from retrodiff.denoiser.config import DenoiserConfig


class EpsDenoiser(nn.Module):
    """Predict the noise of x_n from (x_n, step code, pooled condition context).

    The fused context rows are mean-pooled over present rows, so an absent condition
    contributes a zero vector.
    """

    def __init__(self, config: DenoiserConfig) -> None:
        super().__init__()
        if config.kind != "eps":
            raise ValueError(f"EpsDenoiser needs an eps config, got kind={config.kind!r}")
        self.config = config
        dim = config.model_dim
        self.step_embedding = nn.Embedding(config.steps + 1, dim)
        self.fuser = ConditionFuser(
            config.fusion,
            config.embed_dim,
            dim,
            config.heads,
            config.neighbors,
            role_code=config.role_code,
        )
        layers: list[nn.Module] = [nn.Linear(config.point_dim + 2 * dim, config.ff_dim)]
        for _ in range(config.layers - 1):
            layers += [nn.SiLU(), nn.Linear(config.ff_dim, config.ff_dim)]
        layers += [nn.SiLU(), nn.Linear(config.ff_dim, config.point_dim)]
        self.net = nn.Sequential(*layers)

    def forward(self, xn: torch.Tensor, n: torch.Tensor, cond: ConditionBatch) -> torch.Tensor:
        batch = xn.shape[0]
        if xn.dim() != 2 or xn.shape[1] != self.config.point_dim:
            raise ValueError(
                f"Expected points of shape (B, {self.config.point_dim}), "
                f"got {tuple(xn.shape)}"
            )
        if cond.size != batch:
            raise ValueError(f"Got {cond.size} conditions for {batch} points")
        n = torch.as_tensor(n, dtype=torch.long).expand(batch)
        context, present = self.fuser(cond)
        weights = present.to(context.dtype)
        total = weights.sum(dim=1, keepdim=True).clamp_min(1.0)
        pooled = (context * weights[..., None]).sum(dim=1) / total
        return self.net(torch.cat([xn, self.step_embedding(n), pooled], dim=-1))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
