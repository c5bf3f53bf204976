"""Mask-free manipulation: manipulated training pairs and the restoring denoiser."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from retrodiff.binfmt import Reader, Writer
from retrodiff.config import RunConfig
from retrodiff.denoiser.condition import ConditionSet, stack_conditions
from retrodiff.denoiser.config import DenoiserConfig
from retrodiff.denoiser.grid import GridDenoiser
from retrodiff.denoiser.params import forward, init_params
from retrodiff.diffusion.discrete import (
    DiscreteSchedule,
    sample_forward,
    sample_loop,
    vlb_terms,
)
from retrodiff.editkit.ecc import apply_shift, ecc_align
from retrodiff.embedspace import ConceptWorld, GridEncoder, TokenGrid
from retrodiff.errors import FormatError
from retrodiff.index.base import VectorIndex
from retrodiff.trainer.loop import (
    Corpus,
    TrainResult,
    model_schedule,
    optimize,
    prepare_corpus,
    schedule_of,
)
from retrodiff.trainer.retrieval import retrieve_condition

logger = logging.getLogger(__name__)

PAIRS_MAGIC = b"RDMANIP1"
MAX_REGION_SHARE = 0.5


@dataclass(frozen=True)
class RegionMask:
    """A rectangle of grid cells.

    Attributes:
        top: First row.
        left: First column.
        height: Rows covered.
        width: Columns covered.
        grid_height: Rows of the grid.
        grid_width: Columns of the grid.
    """

    top: int
    left: int
    height: int
    width: int
    grid_height: int
    grid_width: int

    def __post_init__(self) -> None:
        if min(self.top, self.left) < 0 or min(self.height, self.width) < 1:
            raise ValueError(f"Invalid region {self}")
        if self.top + self.height > self.grid_height or self.left + self.width > self.grid_width:
            raise ValueError(f"Region {self} exceeds the grid")
        if self.area > MAX_REGION_SHARE * self.grid_height * self.grid_width:
            raise ValueError(f"Region covers {self.area} cells, more than half of the grid")

    @property
    def area(self) -> int:
        return self.height * self.width

    @property
    def bounds(self) -> tuple[int, int, int, int]:
        """(top, left, height, width)."""
        return self.top, self.left, self.height, self.width

    def keep(self) -> np.ndarray:
        """Boolean (H, W) array of the cells inside the region."""
        keep = np.zeros((self.grid_height, self.grid_width), dtype=bool)
        keep[self.top : self.top + self.height, self.left : self.left + self.width] = True
        return keep


def sample_region(
    rng: np.random.Generator,
    grid_height: int,
    grid_width: int,
    min_area: float = 0.1,
    max_area: float = MAX_REGION_SHARE,
) -> RegionMask:
    """Uniform random rectangle covering between `min_area` and `max_area` of the grid.

    The rectangle shape is drawn uniformly among the feasible shapes, then its position.

    Raises:
        ValueError: If no rectangle fits the area range.
    """
    cells = grid_height * grid_width
    shapes = [
        (h, w)
        for h in range(1, grid_height + 1)
        for w in range(1, grid_width + 1)
        if min_area * cells <= h * w <= max_area * cells
    ]
    if not shapes:
        raise ValueError(f"No rectangle covers between {min_area} and {max_area} of the grid")
    h, w = shapes[rng.integers(len(shapes))]
    top = int(rng.integers(grid_height - h + 1))
    left = int(rng.integers(grid_width - w + 1))
    return RegionMask(top, left, h, w, grid_height, grid_width)


class ManipPair(NamedTuple):
    """A training pair for manipulation.

    Attributes:
        grid: The original grid (H, W).
        manip: The grid with the region replaced from its aligned nearest neighbor.
        region: The replaced region, or None when nothing was replaced.
        cond: Embedding of the original grid restricted to the region (whole grid when
            `region` is None).
    """

    grid: np.ndarray
    manip: np.ndarray
    region: RegionMask | None
    cond: np.ndarray


def nearest_aligned(
    grid: TokenGrid,
    index: VectorIndex,
    world: ConceptWorld,
    encoder: GridEncoder,
    exclude: int | None = None,
    radius: int = 2,
) -> np.ndarray:
    """The grid's nearest indexed neighbor, translated onto the grid.

    Cells the shifted neighbor does not cover keep the grid's own tokens.

    Raises:
        ValueError: If the index holds no usable neighbor.
    """
    result = index.search(encoder.embed_grid(grid), 1 + (exclude is not None))
    ids = [id_ for id_ in result.ids if id_ != exclude]
    if not ids:
        raise ValueError("Index holds no neighbor to build a manipulated pair from")
    neighbor = world.tokens[ids[0]]
    alignment = ecc_align(neighbor, grid.tokens, radius)
    return apply_shift(neighbor, alignment.shift, grid.tokens)


def make_manip_pair(
    grid: TokenGrid,
    index: VectorIndex,
    world: ConceptWorld,
    encoder: GridEncoder,
    region: RegionMask | None,
    exclude: int | None = None,
    radius: int = 2,
    aligned: np.ndarray | None = None,
) -> ManipPair:
    """Replace `region` of `grid` by the same cells of its aligned nearest neighbor.

    Args:
        grid: The original grid.
        index: Index keyed by sample index of `world`.
        world: Source of the neighbor's tokens.
        encoder: Image encoder.
        region: Region to replace; None leaves the grid unchanged.
        exclude: Id to skip, normally the grid's own.
        radius: ECC search radius.
        aligned: Precomputed `nearest_aligned` result.
    """
    tokens = grid.tokens
    if region is None:
        return ManipPair(tokens, tokens.copy(), None, encoder.embed_grid(grid))
    if aligned is None:
        aligned = nearest_aligned(grid, index, world, encoder, exclude, radius)
    keep = region.keep()
    manip = np.where(keep, aligned, tokens)
    return ManipPair(tokens, manip, region, encoder.embed_region(grid, keep))


def save_pairs(pairs: list[ManipPair], vocab_size: int, path: str | Path) -> None:
    """Write pairs in the RDMANIP1 format."""
    if not pairs:
        raise ValueError("Cannot write an empty pair list")
    height, width = pairs[0].grid.shape
    writer = Writer(PAIRS_MAGIC)
    writer.u32(vocab_size, len(pairs), height, width, pairs[0].cond.shape[0])
    for pair in pairs:
        region = pair.region
        writer.array(pair.grid, np.uint8)
        writer.array(pair.manip, np.uint8)
        writer.u32(*((0, 0, 0, 0) if region is None else region.bounds))
        writer.array(pair.cond, np.float64)
    writer.save(path)


def load_pairs(path: str | Path) -> tuple[list[ManipPair], int]:
    """Read pairs written by `save_pairs`; returns the pairs and the vocabulary size.

    Raises:
        FormatError: If the file is not a valid pair file.
    """
    reader = Reader.open(path, PAIRS_MAGIC, FormatError)
    vocab_size, count, height, width, dim = (reader.u32() for _ in range(5))
    pairs = []
    for _ in range(count):
        grid = reader.array(np.uint8, height * width).reshape(height, width).astype(np.int64)
        manip = reader.array(np.uint8, height * width).reshape(height, width).astype(np.int64)
        top, left, h, w = (reader.u32() for _ in range(4))
        region = RegionMask(top, left, h, w, height, width) if h else None
        pairs.append(ManipPair(grid, manip, region, reader.array(np.float64, dim)))
    reader.expect_end()
    return pairs, vocab_size


def manip_config(config: RunConfig) -> DenoiserConfig:
    """Denoiser config of the manipulation model."""
    return config.denoiser_config().model_copy(update={"manip": True})


def build_pairs(
    corpus: Corpus,
    index: VectorIndex,
    config: RunConfig,
    mask_regions: bool = True,
) -> tuple[list[ManipPair], np.ndarray]:
    """`manip.pairs` manipulated pairs per training image, with their image ids."""
    world = corpus.world
    rng = np.random.default_rng([config.manip.seed, 3])
    height, width = world.grid_shape
    pairs, ids = [], []
    for id_ in corpus.train_ids.tolist():
        grid = world.grid(id_)
        aligned = None
        if mask_regions:
            aligned = nearest_aligned(
                grid, index, world, corpus.encoder, exclude=id_, radius=config.manip.radius
            )
        for _ in range(config.manip.pairs):
            region = None
            if mask_regions:
                region = sample_region(
                    rng, height, width, config.manip.min_area, config.manip.max_area
                )
            pairs.append(
                make_manip_pair(grid, index, world, corpus.encoder, region, aligned=aligned)
            )
            ids.append(id_)
    return pairs, np.array(ids, dtype=np.int64)


def train_manip(
    world: ConceptWorld,
    index: VectorIndex,
    config: RunConfig,
    init: GridDenoiser | None = None,
    corpus: Corpus | None = None,
    mask_regions: bool = True,
) -> TrainResult:
    """Train a denoiser to restore original grids from their manipulated versions.

    The condition is the region embedding plus its K nearest neighbors (the image
    itself excluded); the manipulated grid is per-position context.

    Args:
        world: The concept world.
        index: Index over the training split.
        config: Run configuration; `manip` overrides the step count and seed.
        init: Generation checkpoint to warm-start from when `manip.warm_start` is set.
        corpus: The prepared corpus; derived from `world` and `config` if omitted.
        mask_regions: False replaces nothing, so the task is plain reconstruction.

    Raises:
        ValueError: If `manip.warm_start` is set without `init`.
        DivergenceError: If a loss is not finite.
    """
    corpus = corpus or prepare_corpus(world, config)
    schedule = schedule_of(config)
    config = config.with_overrides(
        train={"steps": config.manip.steps, "seed": config.manip.seed}
    )
    train_config = config.train
    pairs, ids = build_pairs(corpus, index, config, mask_regions)
    k = train_config.k if train_config.use_knn else 0
    cache = stack_conditions([
        retrieve_condition(index, pair.cond, k, exclude=int(id_))
        for pair, id_ in zip(pairs, ids.tolist())
    ])
    x0_all = torch.from_numpy(np.stack([p.grid.ravel() for p in pairs]))
    source_all = torch.from_numpy(np.stack([p.manip.ravel() for p in pairs]))

    params = init_params(manip_config(config), config.model.seed, config.world.embed_dim)
    if config.manip.warm_start:
        if init is None:
            raise ValueError("Warm start needs a generation checkpoint")
        missing, _ = params.load_state_dict(init.state_dict(), strict=False)
        logger.info("Warm start; freshly initialized: %s", ", ".join(missing) or "none")
    generator = torch.Generator().manual_seed(train_config.seed)

    def batch_loss(model: GridDenoiser, gen: torch.Generator) -> tuple[torch.Tensor, float, float]:
        rows = torch.randint(0, x0_all.shape[0], (train_config.batch_size,), generator=gen)
        nulled = torch.rand(train_config.batch_size, generator=gen) < train_config.null_dropout
        cond = cache.select(rows).drop(nulled)
        x0, source = x0_all[rows], source_all[rows]
        n = torch.randint(1, schedule.steps + 1, (train_config.batch_size,), generator=gen)
        xn = sample_forward(schedule, x0, n, gen)
        logp = forward(model, xn, n, cond, source=source)
        terms = vlb_terms(schedule, logp, x0, xn, n, train_config.xi)
        part_kl = float((terms.kl + terms.nll).mean())
        return terms.loss, part_kl, float(train_config.xi * terms.aux.mean())

    logger.info("Training manipulation on %d pairs for %d steps", len(pairs), train_config.steps)
    return TrainResult(params, optimize(params, config, generator, batch_loss))


class ManipResult(NamedTuple):
    """An edited grid and the cells that differ from the input."""

    grid: TokenGrid
    changed: np.ndarray


def apply_manip(
    params: GridDenoiser,
    grid: TokenGrid,
    query: np.ndarray,
    guidance: float | None,
    seed: int,
    index: VectorIndex | None = None,
    k: int | None = None,
    schedule: DiscreteSchedule | None = None,
) -> ManipResult:
    """Edit `grid` towards `query` with the manipulation denoiser.

    Args:
        params: Trained manipulation denoiser.
        grid: The grid to edit.
        query: Unit embedding describing the edit.
        guidance: Guidance scale, or None for purely conditional sampling.
        seed: Sampling seed.
        index: Index to retrieve the query's neighbors from; the query alone if omitted.
        k: Neighbors per condition; the model's training K if omitted.
        schedule: The forward chain; the one recorded in the checkpoint if omitted.

    Raises:
        ValueError: If `params` is not a manipulation denoiser.
    """
    config = params.config
    if not config.manip:
        raise ValueError("apply_manip needs a manipulation denoiser")
    schedule = schedule or model_schedule(config)
    k = config.neighbors if k is None else k
    if index is None:
        cond = ConditionSet(query, np.zeros((0, query.shape[0])))
    else:
        cond = retrieve_condition(index, query, k)
    source = torch.tensor(grid.tokens.reshape(1, -1))

    def predict(xn: torch.Tensor, n: torch.Tensor, c: ConditionSet) -> torch.Tensor:
        return forward(params, xn, n, c, source=source)

    generator = torch.Generator().manual_seed(seed)
    output = sample_loop(
        predict, schedule, cond, cond.null(), guidance, generator, 1, config.length
    )
    tokens = output.tokens.numpy().reshape(grid.tokens.shape)
    edited = TokenGrid(tokens, grid.vocab_size)
    return ManipResult(edited, tokens != grid.tokens)
