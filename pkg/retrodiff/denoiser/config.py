"""Architecture configuration shared by both denoiser heads."""

from typing import Literal

from pydantic import BaseModel, model_validator

from retrodiff.denoiser.condition import FusionVariant

MAX_PARAMETERS = 1_000_000


class DenoiserConfig(BaseModel, frozen=True):
    """Dimensions of a denoiser.

    Attributes:
        kind: "grid" for the x_0 predictor over token grids, "eps" for the 2-D noise
            predictor.
        vocab_size: Number of data tokens V.
        height: Grid height.
        width: Grid width.
        embed_dim: Dimension d of condition embeddings.
        steps: Number of diffusion steps N.
        neighbors: K, neighbors per condition at training time.
        model_dim: Width of the hidden representation.
        heads: Attention heads.
        layers: Attention + feed-forward blocks (grid head) or hidden layers (eps head).
        ff_dim: Feed-forward hidden width.
        fusion: Condition fusion variant.
        role_code: Learned query role code under `SELF_ATTN_K1`.
        manip: Accept the tokens of a manipulated grid as per-position context.
        point_dim: Point dimension of the eps head.
        schedule_kind: Discrete schedule family the grid head was trained on.
        slack: Probability of a token escaping MASK at step N.
        uniform_ramp: Final uniform-move share of the unmasked mass.
    """

    model_config = {"extra": "forbid"}

    kind: Literal["grid", "eps"] = "grid"
    vocab_size: int = 10
    height: int = 8
    width: int = 8
    embed_dim: int = 32
    steps: int = 100
    neighbors: int = 10
    model_dim: int = 64
    heads: int = 4
    layers: int = 2
    ff_dim: int = 128
    fusion: FusionVariant = FusionVariant.SELF_ATTN_K1
    role_code: bool = True
    manip: bool = False
    point_dim: int = 2
    schedule_kind: Literal["linear-mask", "absorbing"] = "linear-mask"
    slack: float = 1e-4
    uniform_ramp: float = 0.1

    @model_validator(mode="after")
    def _check_dims(self) -> "DenoiserConfig":
        positive = (
            "vocab_size",
            "height",
            "width",
            "embed_dim",
            "steps",
            "model_dim",
            "heads",
            "layers",
            "ff_dim",
            "point_dim",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.neighbors < 0:
            raise ValueError(f"neighbors must be >= 0, got {self.neighbors}")
        if self.model_dim % self.heads:
            raise ValueError(
                f"model_dim={self.model_dim} is not divisible by heads={self.heads}"
            )
        return self

    @property
    def length(self) -> int:
        """Tokens per grid."""
        return self.height * self.width

    @property
    def states(self) -> int:
        """Token states including MASK."""
        return self.vocab_size + 1
