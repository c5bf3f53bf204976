"""Test the retrodiff.index.ivfpq, retrodiff.index.kmeans and retrodiff.index.io modules."""

from pathlib import Path

import numpy as np
import pytest

from retrodiff.errors import DuplicateIdError, IndexFormatError, InsufficientDataError
from retrodiff.index.flat import FlatIndex
from retrodiff.index.io import load_index, save_index
from retrodiff.index.ivfpq import IvfPqIndex, default_cells, search_ivfpq, train_ivfpq
from retrodiff.index.kmeans import kmeans
from tests.helpers import clustered_units, random_units

DIM = 32

CELL_COUNTS = [(1, 1), (2, 2), (100, 10), (101, 11), (50_000, 224)]


@pytest.fixture(scope="module")
def vectors() -> np.ndarray:
    return clustered_units(np.random.default_rng(0), 2000, DIM, clusters=20)


@pytest.fixture(scope="module")
def index(vectors: np.ndarray) -> IvfPqIndex:
    return train_ivfpq(vectors, m=8, bits=5, seed=0)


def recall_at(
    index: IvfPqIndex, vectors: np.ndarray, queries: np.ndarray, k: int, refine: int = 0
) -> float:
    exact = FlatIndex(DIM)
    exact.add_many(np.arange(vectors.shape[0]), vectors)
    found = 0
    for query in queries:
        truth = set(exact.search(query, k).ids)
        found += len(truth & set(index.search(query, k, refine=refine).ids))
    return found / (k * queries.shape[0])


@pytest.mark.parametrize("n, cells", CELL_COUNTS)
def test_default_cells(n: int, cells: int):
    assert default_cells(n) == cells


def test_kmeans_separates_clusters():
    rng = np.random.default_rng(0)
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    data = np.concatenate([c + 0.1 * rng.standard_normal((50, 2)) for c in centers])
    result = kmeans(data, 3, seed=1)
    labels = result.assignment.reshape(3, 50)
    assert all(len(set(row)) == 1 for row in labels.tolist())
    assert len({row[0] for row in labels.tolist()}) == 3


def test_kmeans_is_deterministic(vectors: np.ndarray):
    a = kmeans(vectors[:300], 8, seed=4, iterations=5)
    b = kmeans(vectors[:300], 8, seed=4, iterations=5)
    assert np.array_equal(a.centroids, b.centroids)


def test_kmeans_needs_enough_data():
    with pytest.raises(InsufficientDataError):
        kmeans(np.zeros((3, 2)), 4)


def test_every_vector_is_in_one_list(index: IvfPqIndex, vectors: np.ndarray):
    listed = [id_ for cell in index.inverted_lists for id_, _ in cell]
    assert sorted(listed) == list(range(vectors.shape[0]))
    assert index.n_cells == default_cells(vectors.shape[0])


def test_refined_recall_against_exact_search(index: IvfPqIndex, vectors: np.ndarray):
    rng = np.random.default_rng(1)
    picks = vectors[rng.integers(vectors.shape[0], size=100)]
    queries = picks + 0.05 * rng.standard_normal(picks.shape)
    queries /= np.linalg.norm(queries, axis=1, keepdims=True)
    assert recall_at(index, vectors, queries, 10, refine=8) >= 0.9


def test_self_query_finds_itself(index: IvfPqIndex, vectors: np.ndarray):
    assert index.search(vectors[17], 1).ids == [17]


def test_searching_every_cell_without_refine_ranks_codes(index: IvfPqIndex):
    """Test that searching every cell without re-ranking still returns sorted distances."""
    query = random_units(np.random.default_rng(2), 1, DIM)[0]
    result = index.search(query, 10, nprobe=index.n_cells, refine=0)
    assert len(result) == 10
    assert result.distances == sorted(result.distances)


def test_search_ivfpq_matches_method(index: IvfPqIndex, vectors: np.ndarray):
    assert search_ivfpq(index, vectors[3], 5, nprobe=4) == index.search(vectors[3], 5, nprobe=4)


def adc_distances(index: IvfPqIndex, query: np.ndarray, ids: list[int]) -> np.ndarray:
    """1 - <query, reconstruction> of the stored vectors `ids`."""
    stored, cells, codes, _ = index.contents()
    positions = [int(np.flatnonzero(stored == id_)[0]) for id_ in ids]
    return 1.0 - index.reconstruct(cells[positions], codes[positions]) @ query


@pytest.mark.parametrize("use_opq", [False, True])
def test_default_search_reports_asymmetric_distances(vectors: np.ndarray, use_opq: bool):
    index = train_ivfpq(vectors, n_cells=16, m=8, bits=4, seed=0, use_opq=use_opq)
    assert index.refine == 0
    query = random_units(np.random.default_rng(3), 1, DIM)[0]
    result = search_ivfpq(index, query, 10)
    assert np.allclose(result.distances, adc_distances(index, query, result.ids))


def test_refine_reports_exact_distances(index: IvfPqIndex, vectors: np.ndarray):
    query = vectors[5]
    result = search_ivfpq(index, query, 5, refine=4)
    assert np.allclose(result.distances, 1.0 - vectors[result.ids] @ query)

def test_opq_does_not_reconstruct_worse(vectors: np.ndarray):
    pq = train_ivfpq(vectors, n_cells=16, m=8, bits=4, seed=3)
    opq = train_ivfpq(vectors, n_cells=16, m=8, bits=4, seed=3, use_opq=True)
    assert opq.rotation is not None
    assert np.allclose(opq.rotation @ opq.rotation.T, np.eye(DIM))
    assert opq.reconstruction_error() <= pq.reconstruction_error() + 1e-12


def test_vectors_without_raw_are_reconstructed(vectors: np.ndarray):
    index = train_ivfpq(vectors, n_cells=16, m=8, bits=4, keep_raw=False)
    approx = index.vectors(np.arange(10))
    assert approx.shape == (10, DIM)
    assert np.mean(np.sum((approx - vectors[:10]) ** 2, axis=1)) < 0.5


def test_training_is_deterministic(vectors: np.ndarray):
    a = train_ivfpq(vectors[:500], n_cells=8, m=4, bits=4, seed=5)
    b = train_ivfpq(vectors[:500], n_cells=8, m=4, bits=4, seed=5)
    assert np.array_equal(a.centroids, b.centroids)
    assert np.array_equal(a.pq.codebooks, b.pq.codebooks)


def test_training_needs_enough_vectors():
    rng = np.random.default_rng(0)
    with pytest.raises(InsufficientDataError):
        train_ivfpq(random_units(rng, 10, DIM), n_cells=20, m=8, bits=2)
    with pytest.raises(InsufficientDataError):
        train_ivfpq(random_units(rng, 100, DIM), m=8, bits=8)


def test_subspaces_must_divide_dimension(vectors: np.ndarray):
    with pytest.raises(ValueError):
        train_ivfpq(vectors, m=5, bits=4)


@pytest.mark.parametrize("bits", [0, 17])
def test_code_width_must_fit_the_format(vectors: np.ndarray, bits: int):
    with pytest.raises(ValueError):
        train_ivfpq(vectors, n_cells=4, m=8, bits=bits)

def test_duplicate_id_is_rejected(index: IvfPqIndex, vectors: np.ndarray):
    with pytest.raises(DuplicateIdError):
        index.add(0, vectors[0])


def test_ivfpq_round_trip(index: IvfPqIndex, vectors: np.ndarray, tmp_path: Path):
    path = tmp_path / "index.bin"
    save_index(index, path)
    loaded = load_index(path)
    assert isinstance(loaded, IvfPqIndex)
    assert np.array_equal(loaded.ids, index.ids)
    assert loaded.search(vectors[5], 10) == index.search(vectors[5], 10)
    save_index(loaded, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_opq_round_trip(vectors: np.ndarray, tmp_path: Path):
    index = train_ivfpq(vectors[:500], n_cells=8, m=4, bits=4, use_opq=True, keep_raw=False)
    save_index(index, tmp_path / "index.bin")
    loaded = load_index(tmp_path / "index.bin")
    assert np.array_equal(loaded.rotation, index.rotation)
    assert np.array_equal(loaded.vectors(np.arange(5)), index.vectors(np.arange(5)))


def test_flat_round_trip(vectors: np.ndarray, tmp_path: Path):
    index = FlatIndex(DIM)
    index.add_many(np.arange(100, 150), vectors[:50])
    save_index(index, tmp_path / "flat.bin")
    loaded = load_index(tmp_path / "flat.bin")
    assert isinstance(loaded, FlatIndex)
    assert np.array_equal(loaded.matrix, index.matrix)
    assert np.array_equal(loaded.ids, index.ids)


def test_load_rejects_unknown_magic(tmp_path: Path):
    path = tmp_path / "index.bin"
    path.write_bytes(b"RDNOPE01" + bytes(16))
    with pytest.raises(IndexFormatError):
        load_index(path)


def test_load_rejects_truncated_index(index: IvfPqIndex, tmp_path: Path):
    path = tmp_path / "index.bin"
    save_index(index, path)
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(IndexFormatError):
        load_index(path)
