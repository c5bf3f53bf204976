"""Test the retrodiff.cli module end to end on a tiny run."""

from pathlib import Path

import pytest

from retrodiff.cli import main
from retrodiff.index.io import load_index
from tests.helpers import TINY_CONFIG


def tiny_sets() -> list[str]:
    args = []
    for line in TINY_CONFIG.strip().splitlines():
        args += ["--set", line.replace(" = ", "=")]
    return args


def run(capsys: pytest.CaptureFixture[str], *argv: str | Path) -> tuple[int, str]:
    code = main([str(a) for a in argv])
    return code, capsys.readouterr().out


@pytest.fixture
def workdir(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> Path:
    """A directory holding a world, its index and a trained model."""
    assert run(capsys, "gen-world", *tiny_sets(), "--out", tmp_path)[0] == 0
    world = tmp_path / "world.bin"
    assert run(capsys, "build-index", *tiny_sets(), "--world", world, "--out", tmp_path)[0] == 0
    code, _ = run(
        capsys,
        "train",
        *tiny_sets(),
        "--world",
        world,
        "--index",
        tmp_path / "index.bin",
        "--out",
        tmp_path,
    )
    assert code == 0
    return tmp_path


def read_manifest(path: Path) -> dict[str, str]:
    return dict(line.split("=", 1) for line in path.read_text().splitlines())


def test_gen_world_is_deterministic(tmp_path: Path, capsys: pytest.CaptureFixture[str]):
    for name in ("a", "b"):
        code, out = run(capsys, "gen-world", *tiny_sets(), "--out", tmp_path / name)
        assert code == 0
        assert out.strip() == str(tmp_path / name / "world.bin")
    first, second = (tmp_path / name / "world.bin" for name in ("a", "b"))
    assert first.read_bytes() == second.read_bytes()
    manifest = read_manifest(tmp_path / "a" / "manifest.txt")
    assert manifest["command"] == "gen-world"
    assert manifest["world.per_concept"] == "20"


def test_build_index_query(workdir: Path, capsys: pytest.CaptureFixture[str]):
    stored = int(load_index(workdir / "index.bin").ids[0])
    code, out = run(
        capsys,
        "build-index",
        *tiny_sets(),
        "--world",
        workdir / "world.bin",
        "--query-id",
        stored,
        "--out",
        workdir,
    )
    assert code == 0
    assert f"query {stored} -> {stored} distance" in out


def test_train_writes_checkpoint_and_log(workdir: Path):
    assert (workdir / "model.ckpt").exists()
    assert len((workdir / "train.log").read_text().splitlines()) == 3
    assert read_manifest(workdir / "manifest.txt")["steps"] == "3"


def test_sample(workdir: Path, capsys: pytest.CaptureFixture[str]):
    code, out = run(
        capsys,
        "sample",
        *tiny_sets(),
        "--checkpoint",
        workdir / "model.ckpt",
        "--world",
        workdir / "world.bin",
        "--index",
        workdir / "index.bin",
        "--concept",
        "1",
        "--cfg",
        "2",
        "--out",
        workdir / "sample",
    )
    assert code == 0
    assert out.strip() == str(workdir / "sample" / "samples.txt")
    grids = (workdir / "sample" / "samples.txt").read_text().strip().split("\n\n")
    assert len(grids) == 2
    assert all(len(grid.splitlines()) == 8 for grid in grids)
    manifest = read_manifest(workdir / "sample" / "manifest.txt")
    assert manifest["cfg"] == "2.0"
    assert manifest["filter"] == "none"
    assert sum(int(c) for c in manifest["concept_counts"].split(",")) == 2


def test_ablate_k(workdir: Path, capsys: pytest.CaptureFixture[str]):
    code, _ = run(
        capsys,
        "ablate",
        *tiny_sets(),
        "--which",
        "k",
        "--world",
        workdir / "world.bin",
        "--index",
        workdir / "index.bin",
        "--checkpoint",
        workdir / "model.ckpt",
        "--out",
        workdir,
    )
    assert code == 0
    lines = (workdir / "ablate_k.csv").read_text().splitlines()
    assert lines[0] == "k,truncated,accuracy"
    assert [line.split(",")[0] for line in lines[1:]] == ["1", "3", "none"]


def test_manip_train_and_edit(workdir: Path, capsys: pytest.CaptureFixture[str]):
    code, _ = run(
        capsys,
        "manip-train",
        *tiny_sets(),
        "--world",
        workdir / "world.bin",
        "--index",
        workdir / "index.bin",
        "--dump-pairs",
        "--out",
        workdir,
    )
    assert code == 0
    assert (workdir / "pairs.bin").exists()
    source = workdir / "input.txt"
    source.write_text("\n".join("01234567" for _ in range(8)) + "\n")
    code, _ = run(
        capsys,
        "manip",
        *tiny_sets(),
        "--checkpoint",
        workdir / "manip.ckpt",
        "--world",
        workdir / "world.bin",
        "--input",
        source,
        "--query-concept",
        "2",
        "--out",
        workdir / "edit",
    )
    assert code == 0
    mask = (workdir / "edit" / "change_mask.txt").read_text().splitlines()
    assert len(mask) == 8 and all(set(row) <= {"x", "."} for row in mask)
    assert len((workdir / "edit" / "edited.txt").read_text().splitlines()) == 8


def test_missing_checkpoint_is_a_data_error(workdir: Path, capsys: pytest.CaptureFixture[str]):
    code, _ = run(
        capsys,
        "sample",
        "--checkpoint",
        workdir / "missing.ckpt",
        "--world",
        workdir / "world.bin",
        "--index",
        workdir / "index.bin",
        "--concept",
        "0",
    )
    assert code == 2


def test_unknown_ablation_is_a_usage_error(tmp_path: Path):
    with pytest.raises(SystemExit) as exc_info:
        main(["ablate", "--which", "depth", "--world", str(tmp_path / "world.bin")])
    assert exc_info.value.code == 1


def test_unknown_config_key_is_a_usage_error(tmp_path: Path, capsys: pytest.CaptureFixture[str]):
    code = main(["gen-world", "--set", "world.bogus=1", "--out", str(tmp_path)])
    assert code == 1
    assert "bogus" in capsys.readouterr().err
    assert not (tmp_path / "world.bin").exists()
