"""Command-line interface.

Every command reads an optional run configuration (`--config`, plus `--set
section.key=value` overrides), writes its artifacts to `--out` and records the
effective parameters in a key=value manifest. Exit codes: 0 success, 1 usage or
configuration error, 2 data error, 3 training divergence.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch

from retrodiff.config import RunConfig
from retrodiff.denoiser.params import load_checkpoint, save_checkpoint
from retrodiff.editkit.manip import apply_manip, build_pairs, save_pairs, train_manip
from retrodiff.embedspace import (
    ConceptWorld,
    Scorer,
    TokenGrid,
    embed_query,
    gen_world,
    nearest_concept,
    save_grids,
)
from retrodiff.errors import ConfigError, DivergenceError, FormatError
from retrodiff.index.io import load_index, save_index
from retrodiff.trainer.ablation import (
    ablate_fusion,
    ablate_index_fraction,
    ablate_k,
    write_table,
)
from retrodiff.trainer.evaluate import evaluate, generate
from retrodiff.trainer.loop import (
    build_training_index,
    model_schedule,
    prepare_corpus,
    train,
    write_log,
)
from retrodiff.trainer.retrieval import ScoreFilter, filter_candidates, retrieve_condition

logger = logging.getLogger(__name__)

WORLD_FILE = "world.bin"
INDEX_FILE = "index.bin"
CHECKPOINT_FILE = "model.ckpt"
MANIP_CHECKPOINT_FILE = "manip.ckpt"
MANIFEST_FILE = "manifest.txt"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGENCE = 3


class _Parser(argparse.ArgumentParser):
    """Argument parser reporting usage errors with exit code 1."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_config(args: argparse.Namespace) -> RunConfig:
    """The config file, if any, followed by the `--set` overrides."""
    lines = [Path(args.config).read_text()] if args.config else []
    lines.extend(args.set or [])
    return RunConfig.parse("\n".join(lines))


def write_manifest(path: Path, entries: dict[str, Any], config: RunConfig) -> None:
    """Write command parameters and the effective configuration as key=value lines."""
    lines = [f"{key}={value}" for key, value in entries.items()]
    lines += [line.replace(" = ", "=", 1) for line in config.dump().splitlines()]
    path.write_text("\n".join(lines) + "\n")
    logger.info("Wrote %s", path)


def _out(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_world(args: argparse.Namespace) -> None:
    config = load_config(args)
    world_config = config.world
    world = gen_world(
        world_config.seed,
        concepts=world_config.concepts,
        per_concept=world_config.per_concept,
        corruption=world_config.corruption,
        vocab_size=world_config.vocab_size,
        height=world_config.height,
        width=world_config.width,
    )
    out = _out(args)
    world.save(out / WORLD_FILE)
    entries = {"command": "gen-world", "world": out / WORLD_FILE}
    write_manifest(out / MANIFEST_FILE, entries, config)
    print(out / WORLD_FILE)


def cmd_build_index(args: argparse.Namespace) -> None:
    config = load_config(args)
    world = ConceptWorld.load(args.world)
    corpus = prepare_corpus(world, config)
    index = build_training_index(corpus, config)
    out = _out(args)
    save_index(index, out / INDEX_FILE)
    write_manifest(
        out / MANIFEST_FILE,
        {"command": "build-index", "world": args.world, "index": out / INDEX_FILE},
        config,
    )
    print(out / INDEX_FILE)
    if args.query_id is not None:
        if args.query_id not in set(index.ids.tolist()):
            raise ValueError(f"Id {args.query_id} is not stored in the index")
        hit = index.search(corpus.embeddings[args.query_id], 1).hits[0]
        print(f"query {args.query_id} -> {hit.id} distance {hit.distance:.6g}")


def cmd_train(args: argparse.Namespace) -> None:
    config = load_config(args)
    world = ConceptWorld.load(args.world)
    index = load_index(args.index)
    corpus = prepare_corpus(world, config)
    result = train(world, index, config, corpus=corpus)
    out = _out(args)
    save_checkpoint(result.params, out / CHECKPOINT_FILE)
    write_log(result.history, out / "train.log")
    entries: dict[str, Any] = {
        "command": "train",
        "world": args.world,
        "index": args.index,
        "checkpoint": out / CHECKPOINT_FILE,
        "steps": len(result.history),
    }
    if args.evaluate:
        report = evaluate(result.params, world, index, config, corpus=corpus)
        entries.update(accuracy=report.accuracy, vlb=report.vlb)
        print(f"accuracy {report.accuracy:.4f} vlb {report.vlb}")
    write_manifest(out / MANIFEST_FILE, entries, config)
    print(out / CHECKPOINT_FILE)


def cmd_manip_train(args: argparse.Namespace) -> None:
    config = load_config(args)
    world = ConceptWorld.load(args.world)
    index = load_index(args.index)
    corpus = prepare_corpus(world, config)
    init = load_checkpoint(args.init) if args.init else None
    result = train_manip(world, index, config, init=init, corpus=corpus)
    out = _out(args)
    save_checkpoint(result.params, out / MANIP_CHECKPOINT_FILE)
    write_log(result.history, out / "manip.log")
    if args.dump_pairs:
        pairs, _ = build_pairs(corpus, index, config)
        save_pairs(pairs, world.vocab_size, out / "pairs.bin")
    write_manifest(
        out / MANIFEST_FILE,
        {
            "command": "manip-train",
            "world": args.world,
            "index": args.index,
            "init": args.init or "none",
            "checkpoint": out / MANIP_CHECKPOINT_FILE,
        },
        config,
    )
    print(out / MANIP_CHECKPOINT_FILE)


def _render_all(tokens: np.ndarray, vocab_size: int) -> str:
    return "\n\n".join(TokenGrid(t, vocab_size).render() for t in tokens) + "\n"


def cmd_sample(args: argparse.Namespace) -> None:
    config = load_config(args)
    sample = config.sample
    k = sample.k if args.k is None else args.k
    guidance = sample.guidance if args.cfg is None else args.cfg
    seed = sample.seed if args.seed is None else args.seed
    count = sample.samples if args.samples is None else args.samples

    world = ConceptWorld.load(args.world)
    index = load_index(args.index)
    params = load_checkpoint(args.checkpoint)
    corpus = prepare_corpus(world, config)
    query = embed_query(args.concept, world, sample.gap, [seed, args.concept], corpus.encoder)
    scorer = Scorer.seeded(sample.scorer_seed, query.shape[0])
    score_filter = ScoreFilter.parse(args.filter, args.quantile)
    if args.filter or args.quantile:
        filtered = filter_candidates(index, query, k, scorer, score_filter, sample.pool)
        cond = filtered.condition
    else:
        cond = retrieve_condition(index, query, k)
    present = cond.neighbors[np.linalg.norm(cond.neighbors, axis=1) > 0]
    mean_score = float(np.mean(scorer.score(present))) if present.size else float("nan")

    schedule = model_schedule(params.config)
    generator = torch.Generator().manual_seed(seed)
    tokens = generate(params, schedule, cond, guidance, generator, count, params.config.length)
    grids = tokens.reshape(count, config.world.height, config.world.width)
    concepts = nearest_concept(corpus.encoder.embed_grids(grids), world, corpus.encoder)
    out = _out(args)
    save_grids(grids, world.vocab_size, out / "samples.bin")
    (out / "samples.txt").write_text(_render_all(grids, world.vocab_size))
    write_manifest(
        out / MANIFEST_FILE,
        {
            "command": "sample",
            "checkpoint": args.checkpoint,
            "index": args.index,
            "concept": args.concept,
            "k": k,
            "cfg": guidance,
            "filter": score_filter.describe(),
            "seed": seed,
            "samples": count,
            "truncated": cond.truncated,
            "mean_neighbor_score": mean_score,
            "concept_counts": ",".join(
                str(int(c)) for c in np.bincount(concepts, minlength=world.concept_count)
            ),
        },
        config,
    )
    print(out / "samples.txt")


ABLATIONS = ("k", "index-fraction", "fusion")


def cmd_ablate(args: argparse.Namespace) -> None:
    config = load_config(args)
    world = ConceptWorld.load(args.world)
    index = load_index(args.index) if args.index else None
    params = load_checkpoint(args.checkpoint) if args.checkpoint else None
    if args.which == "k":
        rows = ablate_k(world, config, params=params, index=index)
    elif args.which == "index-fraction":
        rows = ablate_index_fraction(world, config, params=params, index=index)
    else:
        rows = ablate_fusion(world, config, index=index)
    out = _out(args)
    table = out / f"ablate_{args.which.replace('-', '_')}.csv"
    write_table(rows, table)
    write_manifest(out / MANIFEST_FILE, {"command": "ablate", "which": args.which}, config)
    print(table)


def cmd_manip(args: argparse.Namespace) -> None:
    config = load_config(args)
    params = load_checkpoint(args.checkpoint)
    world = ConceptWorld.load(args.world)
    index = load_index(args.index) if args.index else None
    grid = TokenGrid.parse(Path(args.input).read_text(), world.vocab_size)
    corpus = prepare_corpus(world, config)
    concept = args.query_concept
    query = embed_query(concept, world, config.sample.gap, [args.seed, concept], corpus.encoder)
    guidance = config.sample.guidance if args.cfg is None else args.cfg
    result = apply_manip(params, grid, query, guidance, args.seed, index)
    out = _out(args)
    (out / "edited.txt").write_text(result.grid.render() + "\n")
    save_grids(result.grid.tokens[None], world.vocab_size, out / "edited.bin")
    mask = "\n".join("".join("x" if c else "." for c in row) for row in result.changed)
    (out / "change_mask.txt").write_text(mask + "\n")
    write_manifest(
        out / MANIFEST_FILE,
        {
            "command": "manip",
            "checkpoint": args.checkpoint,
            "input": args.input,
            "query_concept": args.query_concept,
            "cfg": guidance,
            "seed": args.seed,
            "changed_cells": int(result.changed.sum()),
        },
        config,
    )
    print(out / "edited.txt")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="retrodiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    commands = parser.add_subparsers(dest="command", required=True)

    def command(
        name: str, handler: Callable[[argparse.Namespace], None], help_: str
    ) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_)
        sub.add_argument("--config", help="run configuration file")
        sub.add_argument(
            "--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key"
        )
        sub.add_argument("--out", default=".", help="output directory")
        sub.set_defaults(handler=handler)
        return sub

    command("gen-world", cmd_gen_world, "generate a concept world")

    sub = command("build-index", cmd_build_index, "index the training split of a world")
    sub.add_argument("--world", required=True)
    sub.add_argument("--query-id", type=int, help="print the nearest neighbor of a stored id")

    sub = command("train", cmd_train, "train the grid denoiser")
    sub.add_argument("--world", required=True)
    sub.add_argument("--index", required=True)
    sub.add_argument("--evaluate", action="store_true", help="evaluate after training")

    sub = command("manip-train", cmd_manip_train, "train the manipulation denoiser")
    sub.add_argument("--world", required=True)
    sub.add_argument("--index", required=True)
    sub.add_argument("--init", help="generation checkpoint for a warm start")
    sub.add_argument("--dump-pairs", action="store_true", help="write the training pairs")

    sub = command("sample", cmd_sample, "sample grids for a concept")
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--world", required=True)
    sub.add_argument("--index", required=True, help="index to retrieve neighbors from")
    sub.add_argument("--concept", type=int, required=True)
    sub.add_argument("--k", type=int, help="neighbors per condition")
    sub.add_argument("--cfg", type=float, help="classifier-free guidance scale")
    sub.add_argument("--filter", help="keep neighbors with L <= score < H, given as 'L,H'")
    sub.add_argument("--quantile", type=int, choices=range(1, 6), help="score quantile 1-5")
    sub.add_argument("--samples", type=int)
    sub.add_argument("--seed", type=int)

    sub = command("ablate", cmd_ablate, "run an ablation harness")
    sub.add_argument("--which", required=True, choices=ABLATIONS)
    sub.add_argument("--world", required=True)
    sub.add_argument("--index", help="training index; built from the world if omitted")
    sub.add_argument("--checkpoint", help="trained model; trained if omitted")

    sub = command("manip", cmd_manip, "edit a grid towards a concept")
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--world", required=True)
    sub.add_argument("--input", required=True, help="grid as text art")
    sub.add_argument("--query-concept", type=int, required=True)
    sub.add_argument("--index", help="index to retrieve the query's neighbors from")
    sub.add_argument("--cfg", type=float)
    sub.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.handler(args)
    except ConfigError as ex:
        print(f"retrodiff: {ex}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as ex:
        print(f"retrodiff: {ex}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (FormatError, OSError, ValueError) as ex:
        print(f"retrodiff: {ex}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
