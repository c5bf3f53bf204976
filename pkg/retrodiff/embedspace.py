"""The joint embedding space, the toy encoders and the synthetic concept world.

Grids of discrete tokens stand in for tokenized images. `GridEncoder` stands in for a
pretrained image encoder, `embed_query` for a text encoder whose outputs sit at a
controllable distance (the modality gap) from the image embeddings of a concept.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence, TypeAlias

import numpy as np

from retrodiff.binfmt import Reader, Writer
from retrodiff.errors import FormatError, MaskTokenError, WorldError

logger = logging.getLogger(__name__)

VOCAB_SIZE = 10
GRID_HEIGHT = 8
GRID_WIDTH = 8
EMBED_DIM = 32
UNIT_TOLERANCE = 1e-9
PALETTE_CONCENTRATION = 0.2

_WORLD_MAGIC = b"RDWORLD1"
_GRIDS_MAGIC = b"RDGRIDS1"
_GLYPHS = "0123456789abcdefghijklmnopqrstuvwxyz"
_MASK_GLYPH = "#"

Embedding: TypeAlias = np.ndarray
"""A unit-norm float64 vector of the joint embedding space."""

Seed: TypeAlias = int | Sequence[int]


def normalize(vector: np.ndarray) -> Embedding:
    """Scale `vector` (or each row of a matrix) to unit L2 norm.

    Raises:
        ValueError: If a vector has zero norm.
    """
    values = np.asarray(vector, dtype=np.float64)
    norms = np.linalg.norm(values, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("Cannot normalize a zero vector")
    return values / norms


def is_unit(vector: np.ndarray, tol: float = UNIT_TOLERANCE) -> bool:
    """Whether every row of `vector` has norm within `tol` of 1."""
    norms = np.linalg.norm(np.asarray(vector, dtype=np.float64), axis=-1)
    return bool(np.all(np.abs(norms - 1.0) <= tol))


def cosine_distance(a: Embedding, b: Embedding) -> float:
    """Cosine distance `1 - <a, b>` between two unit embeddings, in [0, 2]."""
    return float(min(max(1.0 - float(np.dot(a, b)), 0.0), 2.0))


@dataclass(frozen=True, eq=False)
class TokenGrid:
    """An H x W grid of tokens over a vocabulary of size V.

    Token `vocab_size` is the MASK symbol. It never occurs in data grids and is only
    allowed inside diffusion states.

    Attributes:
        tokens: Integer array of shape (height, width). Stored read-only.
        vocab_size: Number of data tokens V.
    """

    tokens: np.ndarray
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self) -> None:
        tokens = np.array(self.tokens, dtype=np.int64)
        if tokens.ndim != 2 or 0 in tokens.shape:
            raise ValueError(f"Grid tokens must be a non-empty 2-D array, got {tokens.shape}")
        if tokens.min() < 0 or tokens.max() > self.vocab_size:
            raise ValueError(f"Grid tokens must lie in [0, {self.vocab_size}]")
        tokens.flags.writeable = False
        object.__setattr__(self, "tokens", tokens)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenGrid):
            return NotImplemented
        return self.vocab_size == other.vocab_size and np.array_equal(
            self.tokens, other.tokens
        )

    def __hash__(self) -> int:
        return hash((self.vocab_size, self.tokens.shape, self.tokens.tobytes()))

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    @property
    def height(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    @property
    def mask_count(self) -> int:
        return int(np.count_nonzero(self.tokens == self.mask_id))

    def render(self) -> str:
        """Text art, one character per token and `#` for MASK."""
        if self.vocab_size > len(_GLYPHS):
            raise ValueError(f"Cannot render a vocabulary of {self.vocab_size} tokens")
        rows = []
        for row in self.tokens:
            rows.append(
                "".join(_MASK_GLYPH if t == self.mask_id else _GLYPHS[t] for t in row)
            )
        return "\n".join(rows)

    @classmethod
    def parse(cls, text: str, vocab_size: int = VOCAB_SIZE) -> "TokenGrid":
        """Inverse of `render`."""
        lookup = {glyph: i for i, glyph in enumerate(_GLYPHS[:vocab_size])}
        lookup[_MASK_GLYPH] = vocab_size
        rows = [line.strip() for line in text.strip().splitlines() if line.strip()]
        try:
            tokens = [[lookup[ch] for ch in row] for row in rows]
        except KeyError as ex:
            raise ValueError(f"Unknown grid glyph {ex.args[0]!r}") from ex
        return cls(np.array(tokens), vocab_size)


@dataclass(frozen=True, eq=False)
class ConceptWorld:
    """Synthetic dataset: C concept templates and noisy samples of each.

    Attributes:
        templates: Array (C, H, W) of template tokens.
        tokens: Array (S, H, W) of sample tokens, concept-major.
        labels: Array (S,) of concept ids.
        vocab_size: Number of data tokens V.
        seed: Generation seed, if known.
        corruption: Per-cell resampling probability, if known.
    """

    templates: np.ndarray
    tokens: np.ndarray
    labels: np.ndarray
    vocab_size: int = VOCAB_SIZE
    seed: int | None = None
    corruption: float | None = None

    def __post_init__(self) -> None:
        for name in ("templates", "tokens", "labels"):
            values = np.array(getattr(self, name), dtype=np.int64)
            values.flags.writeable = False
            object.__setattr__(self, name, values)
        if self.tokens.shape[0] != self.labels.shape[0]:
            raise WorldError("Every sample needs exactly one concept label")
        if self.templates.shape[1:] != self.tokens.shape[1:]:
            raise WorldError("Templates and samples must share a grid shape")

    @property
    def concept_count(self) -> int:
        return self.templates.shape[0]

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.tokens.shape[1], self.tokens.shape[2]

    def grid(self, index: int) -> TokenGrid:
        return TokenGrid(self.tokens[index], self.vocab_size)

    def template(self, concept_id: int) -> TokenGrid:
        return TokenGrid(self.templates[concept_id], self.vocab_size)

    def members(self, concept_id: int) -> np.ndarray:
        """Sample indices belonging to `concept_id`."""
        if not 0 <= concept_id < self.concept_count:
            raise WorldError(
                f"Unknown concept id {concept_id}; world has {self.concept_count}"
            )
        return np.flatnonzero(self.labels == concept_id)

    def save(self, path: str | Path) -> None:
        """Write the world in the RDWORLD1 format."""
        height, width = self.grid_shape
        writer = Writer(_WORLD_MAGIC)
        writer.u32(self.concept_count, self.vocab_size, height, width, self.size)
        writer.array(self.templates, np.uint8)
        writer.array(self.labels, np.uint32)
        writer.array(self.tokens, np.uint8)
        writer.save(path)

    @classmethod
    def load(cls, path: str | Path) -> "ConceptWorld":
        """Read a world written by `save`.

        Raises:
            FormatError: If the file is not a valid world file.
        """
        reader = Reader.open(path, _WORLD_MAGIC, FormatError)
        concepts, vocab, height, width, size = (reader.u32() for _ in range(5))
        templates = reader.array(np.uint8, concepts * height * width)
        labels = reader.array(np.uint32, size)
        tokens = reader.array(np.uint8, size * height * width)
        reader.expect_end()
        return cls(
            templates.reshape(concepts, height, width),
            tokens.reshape(size, height, width),
            labels,
            vocab_size=vocab,
        )


def gen_world(
    seed: int,
    concepts: int = 4,
    per_concept: int = 100,
    corruption: float = 0.1,
    vocab_size: int = VOCAB_SIZE,
    height: int = GRID_HEIGHT,
    width: int = GRID_WIDTH,
) -> ConceptWorld:
    """Generate a concept world.

    Each template draws its own token palette from a symmetric Dirichlet and fills its
    cells from that palette, so concepts differ in their token histograms as well as in
    layout. Each sample copies its template and resamples every cell uniformly over the
    vocabulary with probability `corruption`.

    Args:
        seed: Generation seed.
        concepts: Number of concepts C (>= 1).
        per_concept: Samples per concept.
        corruption: Per-cell resampling probability, in [0, 0.5).
        vocab_size: Number of data tokens V.
        height: Grid height.
        width: Grid width.

    Returns:
        The generated world, samples in concept-major order.

    Raises:
        WorldError: If the parameters are out of range.
    """
    if concepts < 1:
        raise WorldError(f"A world needs at least one concept, got {concepts}")
    if per_concept < 1:
        raise WorldError(f"A world needs at least one sample per concept, got {per_concept}")
    if not 0 <= corruption < 0.5:
        raise WorldError(f"Corruption rate must lie in [0, 0.5), got {corruption}")
    if not 1 <= vocab_size < 255:
        raise WorldError(f"Vocabulary size must lie in [1, 254], got {vocab_size}")
    rng = np.random.default_rng(seed)
    palettes = rng.dirichlet(np.full(vocab_size, PALETTE_CONCENTRATION), size=concepts)
    templates = np.stack([rng.choice(vocab_size, size=(height, width), p=p) for p in palettes])
    shape = (concepts, per_concept, height, width)
    resample = rng.random(shape) < corruption
    fresh = rng.integers(0, vocab_size, size=shape)
    tokens = np.where(resample, fresh, templates[:, None])
    labels = np.repeat(np.arange(concepts), per_concept)
    return ConceptWorld(
        templates,
        tokens.reshape(-1, height, width),
        labels,
        vocab_size=vocab_size,
        seed=seed,
        corruption=corruption,
    )


@dataclass(frozen=True, eq=False)
class GridEncoder:
    """Deterministic stand-in for a pretrained image encoder.

    Features are the token frequencies of the whole grid and of each quadrant,
    concatenated, followed by a fixed seeded random projection to `dim` dimensions
    and L2 normalization.
    """

    vocab_size: int = VOCAB_SIZE
    height: int = GRID_HEIGHT
    width: int = GRID_WIDTH
    dim: int = EMBED_DIM
    seed: int = 0
    projection: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        rng = np.random.default_rng(self.seed)
        features = 5 * self.vocab_size
        projection = rng.standard_normal((features, self.dim)) / np.sqrt(self.dim)
        projection.flags.writeable = False
        object.__setattr__(self, "projection", projection)

    @cached_property
    def _quadrants(self) -> np.ndarray:
        """Quadrant id (0..3) of every cell, shape (H, W)."""
        rows = (np.arange(self.height) >= self.height // 2).astype(np.int64)
        cols = (np.arange(self.width) >= self.width // 2).astype(np.int64)
        return 2 * rows[:, None] + cols[None, :]

    def features(self, tokens: np.ndarray, keep: np.ndarray | None = None) -> np.ndarray:
        """Histogram features of grids (..., H, W): the whole grid, then each quadrant.

        Cells where `keep` is False are background: they count towards no histogram.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.shape[-2:] != (self.height, self.width):
            raise ValueError(
                f"Expected grids of shape {(self.height, self.width)}, got {tokens.shape[-2:]}"
            )
        if np.any(tokens == self.vocab_size):
            raise MaskTokenError(int(np.count_nonzero(tokens == self.vocab_size)))
        if tokens.min(initial=0) < 0 or tokens.max(initial=0) > self.vocab_size:
            raise ValueError(f"Tokens must lie in [0, {self.vocab_size})")
        lead = tokens.shape[:-2]
        flat = tokens.reshape(-1, self.height * self.width)
        onehot = np.eye(self.vocab_size)[flat]
        if keep is not None:
            weight = np.asarray(keep, dtype=np.float64).reshape(-1, self.height * self.width)
            onehot = onehot * weight[..., None]
        quadrant = self._quadrants.reshape(-1)
        parts = [onehot.sum(axis=1) / (self.height * self.width)]
        for q in range(4):
            members = quadrant == q
            parts.append(onehot[:, members].sum(axis=1) / max(int(members.sum()), 1))
        return np.concatenate(parts, axis=1).reshape(*lead, 5 * self.vocab_size)

    def embed_grids(self, tokens: np.ndarray, keep: np.ndarray | None = None) -> np.ndarray:
        """Embed a stack of grids (..., H, W) into unit vectors (..., dim)."""
        projected = self.features(tokens, keep) @ self.projection
        try:
            return normalize(projected)
        except ValueError as ex:
            raise ValueError("Grid features project to the zero vector") from ex

    def embed_grid(self, grid: TokenGrid) -> Embedding:
        """Embed one grid.

        Raises:
            MaskTokenError: If the grid contains MASK tokens.
        """
        return self.embed_grids(grid.tokens)

    def embed_region(self, grid: TokenGrid, keep: np.ndarray) -> Embedding:
        """Embed only the cells of `grid` where `keep` is True.

        The rest of the grid is treated as a reserved background token that
        contributes to no histogram.

        Raises:
            ValueError: If `keep` selects no cell.
        """
        keep = np.asarray(keep, dtype=bool)
        if not keep.any():
            raise ValueError("Region selects no cells")
        return self.embed_grids(grid.tokens, keep)


_DEFAULT_ENCODER: GridEncoder | None = None


def default_encoder() -> GridEncoder:
    """The shared encoder with default dimensions and seed."""
    global _DEFAULT_ENCODER
    if _DEFAULT_ENCODER is None:
        _DEFAULT_ENCODER = GridEncoder()
    return _DEFAULT_ENCODER


def embed_grid(grid: TokenGrid, encoder: GridEncoder | None = None) -> Embedding:
    """Embed a data grid with `encoder` (the default encoder if omitted)."""
    return (encoder or default_encoder()).embed_grid(grid)


def concept_mean(
    concept_id: int, world: ConceptWorld, encoder: GridEncoder | None = None
) -> np.ndarray:
    """Mean (unnormalized) image embedding of a concept's samples."""
    encoder = encoder or default_encoder()
    members = world.members(concept_id)
    return encoder.embed_grids(world.tokens[members]).mean(axis=0)


def embed_query(
    concept_id: int,
    world: ConceptWorld,
    gap: float,
    seed: Seed,
    encoder: GridEncoder | None = None,
) -> Embedding:
    """Stand-in text embedding for a concept.

    The mean image embedding of the concept is perturbed by an isotropic Gaussian whose
    per-coordinate standard deviation is `gap`, then renormalized. `gap == 0` gives the
    normalized mean direction exactly.

    Args:
        concept_id: The concept to describe.
        world: The world whose samples define the concept.
        gap: Modality-gap scale (>= 0).
        seed: Seed (or seed sequence) of the perturbation.
        encoder: Image encoder; the default encoder if omitted.

    Raises:
        WorldError: If `concept_id` is not in `world`.
        ValueError: If `gap` is negative.
    """
    if gap < 0:
        raise ValueError(f"Modality gap must be >= 0, got {gap}")
    mean = concept_mean(concept_id, world, encoder)
    if gap == 0:
        return normalize(mean)
    rng = np.random.default_rng(seed)
    return normalize(mean + gap * rng.standard_normal(mean.shape[0]))


@dataclass(frozen=True, eq=False)
class Scorer:
    """Linear stand-in for an aesthetics classifier: `score(e) = <direction, e>`."""

    direction: Embedding

    def __post_init__(self) -> None:
        direction = normalize(self.direction)
        direction.flags.writeable = False
        object.__setattr__(self, "direction", direction)

    @classmethod
    def seeded(cls, seed: int = 0, dim: int = EMBED_DIM) -> "Scorer":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal(dim))

    def score(self, embedding: np.ndarray) -> float | np.ndarray:
        """Score one embedding, or each row of a matrix of embeddings."""
        scores = np.asarray(embedding, dtype=np.float64) @ self.direction
        return float(scores) if np.ndim(scores) == 0 else scores


def score(scorer: Scorer, embedding: Embedding) -> float:
    """Score a unit embedding with `scorer`, in [-1, 1]."""
    return scorer.score(embedding)


def nearest_concept(
    embeddings: np.ndarray, world: ConceptWorld, encoder: GridEncoder | None = None
) -> np.ndarray:
    """Concept whose template embedding is closest (cosine) to each row of `embeddings`."""
    encoder = encoder or default_encoder()
    templates = encoder.embed_grids(world.templates)
    return np.argmax(np.atleast_2d(embeddings) @ templates.T, axis=1)


def save_grids(grids: np.ndarray, vocab_size: int, path: str | Path) -> None:
    """Write a batch of grids (B, H, W) in the RDGRIDS1 format."""
    grids = np.asarray(grids)
    count, height, width = grids.shape
    writer = Writer(_GRIDS_MAGIC)
    writer.u32(vocab_size, count, height, width)
    writer.array(grids, np.uint8)
    writer.save(path)


def load_grids(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a grid batch; returns the (B, H, W) tokens and the vocabulary size."""
    reader = Reader.open(path, _GRIDS_MAGIC, FormatError)
    vocab_size, count, height, width = (reader.u32() for _ in range(4))
    grids = reader.array(np.uint8, count * height * width).astype(np.int64)
    reader.expect_end()
    return grids.reshape(count, height, width), vocab_size
