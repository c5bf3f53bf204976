"""Run configuration.

Configuration files hold one `section.key = value` pair per line. `#` starts a comment.
Every key has a default and unknown sections or keys are rejected.

    # run.cfg
    world.seed = 0
    train.k = 10
    train.fusion = self_attn_k1
    ablate.k_list = 1,5,10,20,100,1000
"""

from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ValidationError, field_validator, model_validator

from retrodiff.denoiser.condition import FusionVariant
from retrodiff.denoiser.config import DenoiserConfig
from retrodiff.errors import ConfigError


class Section(BaseModel, frozen=True):
    """Base class of configuration sections."""

    model_config = {"extra": "forbid"}


class WorldConfig(Section):
    """Concept world and encoder.

    Attributes:
        seed: World generation seed.
        concepts: Number of concepts C.
        per_concept: Samples per concept.
        corruption: Per-cell resampling probability.
        vocab_size: Number of data tokens V.
        height: Grid height.
        width: Grid width.
        embed_dim: Embedding dimension d.
        encoder_seed: Seed of the encoder projection.
        holdout: Fraction of every concept held out of the training index.
    """

    seed: int = 0
    concepts: int = 4
    per_concept: int = 100
    corruption: float = 0.1
    vocab_size: int = 10
    height: int = 8
    width: int = 8
    embed_dim: int = 32
    encoder_seed: int = 0
    holdout: float = 0.1

    @field_validator("holdout")
    @classmethod
    def _check_holdout(cls, value: float) -> float:
        if not 0 <= value < 1:
            raise ValueError(f"holdout must lie in [0, 1), got {value}")
        return value


class IndexConfig(Section):
    """Retrieval index.

    Attributes:
        kind: "flat" (exact) or "ivfpq" (approximate).
        n_cells: Coarse cells; 0 selects ceil(sqrt(N)).
        m: PQ subspaces.
        bits: Bits per PQ code.
        opq: Learn an OPQ rotation.
        opq_rounds: Alternating OPQ rounds.
        nprobe: Cells searched per query.
        refine: Exact re-ranking factor; 0 ranks and reports compressed distances.
        keep_raw: Store raw vectors next to the codes.
        seed: k-means seed.
    """

    kind: Literal["flat", "ivfpq"] = "ivfpq"
    n_cells: int = 0
    m: int = 8
    bits: int = 8
    opq: bool = False
    opq_rounds: int = 4
    nprobe: int = 20
    refine: int = 0
    keep_raw: bool = True
    seed: int = 0


class ScheduleConfig(Section):
    """Diffusion schedules.

    Attributes:
        steps: Discrete steps N.
        kind: Discrete schedule family.
        slack: Probability of a token escaping MASK at step N.
        uniform_ramp: Final uniform-move share of the unmasked mass.
        continuous_steps: Steps of the continuous chain.
        beta_start: First continuous beta (1000-step reference).
        beta_end: Last continuous beta (1000-step reference).
    """

    steps: int = 100
    kind: Literal["linear-mask", "absorbing"] = "linear-mask"
    slack: float = 1e-4
    uniform_ramp: float = 0.1
    continuous_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02


class ModelConfig(Section):
    """Denoiser width and depth.

    Attributes:
        model_dim: Hidden width.
        heads: Attention heads.
        layers: Blocks.
        ff_dim: Feed-forward width.
        role_code: Learned query role code.
        seed: Initialization seed.
    """

    model_dim: int = 64
    heads: int = 4
    layers: int = 2
    ff_dim: int = 128
    role_code: bool = True
    seed: int = 0


class TrainConfig(Section):
    """Training and evaluation.

    Attributes:
        k: Neighbors per condition.
        guidance: Classifier-free guidance scale used when sampling.
        xi: Weight of the auxiliary x_0 cross-entropy.
        null_dropout: Probability of replacing a training condition by the null one.
        steps: Optimization steps.
        learning_rate: Optimizer step size.
        batch_size: Grids per step.
        optimizer: "sgd" (plain, no momentum) or "adam".
        fusion: Condition fusion variant.
        index_fraction: Fraction of the training split stored in the index.
        gap: Modality-gap scale of evaluation queries.
        seed: Seed of batches, noise, dropout and evaluation.
        exclude_self: Drop a training image from its own neighbor list.
        use_knn: Condition on neighbors; False trains on the query embedding alone.
        log_interval: Steps between log lines.
        eval_samples: Generated grids per concept when evaluating.
    """

    k: int = 10
    guidance: float = 8.0
    xi: float = 5e-4
    null_dropout: float = 0.1
    steps: int = 2000
    learning_rate: float = 0.1
    batch_size: int = 16
    optimizer: Literal["adam", "sgd"] = "sgd"
    fusion: FusionVariant = FusionVariant.SELF_ATTN_K1
    index_fraction: float = 1.0
    gap: float = 0.3
    seed: int = 0
    exclude_self: bool = False
    use_knn: bool = True
    log_interval: int = 100
    eval_samples: int = 25

    @model_validator(mode="after")
    def _check_ranges(self) -> "TrainConfig":
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")
        if not 0 <= self.null_dropout <= 1:
            raise ValueError(f"null_dropout must lie in [0, 1], got {self.null_dropout}")
        if not 0 < self.index_fraction <= 1:
            raise ValueError(f"index_fraction must lie in (0, 1], got {self.index_fraction}")
        if self.steps < 0 or self.batch_size < 1 or self.log_interval < 1:
            raise ValueError("steps must be >= 0, batch_size and log_interval >= 1")
        if self.gap < 0:
            raise ValueError(f"gap must be >= 0, got {self.gap}")
        return self


class SampleConfig(Section):
    """Inference.

    Attributes:
        k: Neighbors per condition.
        guidance: Classifier-free guidance scale.
        samples: Grids to generate.
        pool: Candidate pool retrieved before score filtering.
        gap: Modality-gap scale of the query.
        seed: Sampling seed.
        scorer_seed: Seed of the scorer direction.
    """

    k: int = 10
    guidance: float = 8.0
    samples: int = 16
    pool: int = 10_000
    gap: float = 0.3
    seed: int = 0
    scorer_seed: int = 0


class ManipConfig(Section):
    """Manipulation training.

    Attributes:
        radius: ECC shift search radius.
        min_area: Smallest region, as a fraction of the grid.
        max_area: Largest region, as a fraction of the grid.
        steps: Optimization steps.
        warm_start: Initialize from the generation checkpoint.
        pairs: Manipulated pairs built per training image.
        seed: Seed of regions, batches and noise.
    """

    radius: int = 2
    min_area: float = 0.1
    max_area: float = 0.5
    steps: int = 2000
    warm_start: bool = False
    pairs: int = 4
    seed: int = 0

    @model_validator(mode="after")
    def _check_area(self) -> "ManipConfig":
        if not 0 < self.min_area <= self.max_area <= 0.5:
            raise ValueError("Region areas must satisfy 0 < min_area <= max_area <= 0.5")
        return self


class AblationConfig(Section):
    """Sweeps of the ablation harnesses.

    Attributes:
        k_list: Inference-time neighbor counts.
        fractions: Index fractions.
    """

    k_list: tuple[int, ...] = (1, 5, 10, 20, 100, 1000)
    fractions: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7)

    @field_validator("k_list", "fractions", mode="before")
    @classmethod
    def _split(cls, value: Any) -> Any:
        if isinstance(value, str):
            return tuple(v.strip() for v in value.split(",") if v.strip())
        return value


class RunConfig(Section):
    """Every section of a run."""

    world: WorldConfig = WorldConfig()
    index: IndexConfig = IndexConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    sample: SampleConfig = SampleConfig()
    manip: ManipConfig = ManipConfig()
    ablate: AblationConfig = AblationConfig()

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        """Parse `section.key = value` lines.

        Raises:
            ConfigError: On malformed lines, unknown keys or invalid values.
        """
        sections: dict[str, dict[str, str]] = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot or not name:
                raise ConfigError(f"Line {number}: expected 'section.key = value', got {raw!r}")
            if section not in cls.model_fields:
                raise ConfigError(f"Line {number}: unknown section {section!r}")
            sections.setdefault(section, {})[name.strip()] = value.strip()
        try:
            return cls(**{
                section: cls.model_fields[section].annotation(**values)
                for section, values in sections.items()
            })
        except ValidationError as ex:
            raise ConfigError(f"Invalid configuration: {ex}") from ex

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.parse(Path(path).read_text())

    def with_overrides(self, **sections: dict[str, Any]) -> "RunConfig":
        """Copy with some keys replaced, e.g. `with_overrides(train={"steps": 0})`."""
        try:
            updates = {
                name: type(getattr(self, name)).model_validate(
                    {**getattr(self, name).model_dump(), **values}
                )
                for name, values in sections.items()
            }
            return type(self).model_validate({**self._sections(), **updates})
        except ValidationError as ex:
            raise ConfigError(f"Invalid configuration: {ex}") from ex

    def _sections(self) -> dict[str, Section]:
        return {name: getattr(self, name) for name in type(self).model_fields}

    def dump(self) -> str:
        """The effective configuration in the format `parse` reads."""
        lines = []
        for name, section in self._sections().items():
            for key, value in section.model_dump().items():
                lines.append(f"{name}.{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def denoiser_config(self, kind: Literal["grid", "eps"] = "grid") -> DenoiserConfig:
        """Architecture of the denoiser this run trains."""
        return DenoiserConfig(
            kind=kind,
            vocab_size=self.world.vocab_size,
            height=self.world.height,
            width=self.world.width,
            embed_dim=self.world.embed_dim,
            steps=self.schedule.steps if kind == "grid" else self.schedule.continuous_steps,
            neighbors=self.train.k if self.train.use_knn else 0,
            model_dim=self.model.model_dim,
            heads=self.model.heads,
            layers=self.model.layers,
            ff_dim=self.model.ff_dim,
            fusion=self.train.fusion,
            role_code=self.model.role_code,
            schedule_kind=self.schedule.kind,
            slack=self.schedule.slack,
            uniform_ramp=self.schedule.uniform_ramp,
        )


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, FusionVariant):
        return value.value
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)
