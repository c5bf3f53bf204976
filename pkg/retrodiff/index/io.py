"""Read and write index files.

Flat index (`RDFLAT01`): dim, n (u32); ids (i64 x n); vectors (f64 x n x dim).

IVF-PQ index (`RDIVFPQ1`): version, dim, n_cells, m, bits, opq flag, raw flag, nprobe,
refine, n (u32); centroids (f64); codebooks (f64); rotation (f64, if opq); ids (i64);
cells (u32); codes (u8, or u16 above 8 bits); raw vectors (f64, if stored).
"""

from pathlib import Path

import numpy as np

from retrodiff.binfmt import MAGIC_BYTES, Reader, Writer
from retrodiff.errors import IndexFormatError
from retrodiff.index.base import VectorIndex
from retrodiff.index.flat import FlatIndex
from retrodiff.index.ivfpq import IvfPqIndex, ProductQuantizer

FLAT_MAGIC = b"RDFLAT01"
IVFPQ_MAGIC = b"RDIVFPQ1"
IVFPQ_VERSION = 1


def save_index(index: VectorIndex, path: str | Path) -> None:
    """Write `index` to `path` in the format matching its type."""
    if isinstance(index, FlatIndex):
        writer = _write_flat(index)
    elif isinstance(index, IvfPqIndex):
        writer = _write_ivfpq(index)
    else:
        raise TypeError(f"Cannot save index of type {type(index).__name__}")
    writer.save(path)


def load_index(path: str | Path) -> VectorIndex:
    """Read an index written by `save_index`.

    Raises:
        IndexFormatError: If the magic, version or payload is invalid.
    """
    data = Path(path).read_bytes()
    magic = data[:MAGIC_BYTES]
    if magic == FLAT_MAGIC:
        return _read_flat(Reader(data, FLAT_MAGIC, IndexFormatError))
    if magic == IVFPQ_MAGIC:
        return _read_ivfpq(Reader(data, IVFPQ_MAGIC, IndexFormatError))
    raise IndexFormatError(f"Unknown index magic {magic!r} in {path}")


def _write_flat(index: FlatIndex) -> Writer:
    writer = Writer(FLAT_MAGIC).u32(index.dim, index.size)
    return writer.array(index.ids, np.int64).array(index.matrix, np.float64)


def _read_flat(reader: Reader) -> FlatIndex:
    dim, size = reader.u32(), reader.u32()
    ids = reader.array(np.int64, size)
    vectors = reader.array(np.float64, size * dim).reshape(size, dim)
    reader.expect_end()
    index = FlatIndex(dim)
    index.add_many(ids, vectors)
    return index


def _write_ivfpq(index: IvfPqIndex) -> Writer:
    opq = index.rotation is not None
    writer = Writer(IVFPQ_MAGIC)
    writer.u32(IVFPQ_VERSION, index.dim, index.n_cells, index.m, index.bits)
    writer.u32(int(opq), int(index.keep_raw), index.nprobe, index.refine, index.size)
    writer.array(index.centroids, np.float64)
    writer.array(index.pq.codebooks, np.float64)
    if opq:
        writer.array(index.rotation, np.float64)
    ids, cells, codes, raw = index.contents()
    writer.array(ids, np.int64)
    writer.array(cells, np.uint32)
    writer.array(codes, index.pq.code_dtype)
    if raw is not None:
        writer.array(raw, np.float64)
    return writer


def _read_ivfpq(reader: Reader) -> IvfPqIndex:
    version = reader.u32()
    if version != IVFPQ_VERSION:
        raise IndexFormatError(f"Unsupported IVF-PQ index version {version}")
    dim, n_cells, m, bits = (reader.u32() for _ in range(4))
    opq, keep_raw, nprobe, refine, size = (reader.u32() for _ in range(5))
    if m == 0 or dim % m or bits > 16:
        raise IndexFormatError(f"Invalid PQ layout dim={dim}, m={m}, bits={bits}")
    ksub = 2**bits
    centroids = reader.array(np.float64, n_cells * dim).reshape(n_cells, dim)
    codebooks = reader.array(np.float64, m * ksub * (dim // m)).reshape(m, ksub, dim // m)
    rotation = reader.array(np.float64, dim * dim).reshape(dim, dim) if opq else None
    pq = ProductQuantizer(codebooks)
    ids = reader.array(np.int64, size)
    cells = reader.array(np.uint32, size)
    codes = reader.array(pq.code_dtype, size * m).reshape(size, m)
    raw = reader.array(np.float64, size * dim).reshape(size, dim) if keep_raw else None
    reader.expect_end()
    index = IvfPqIndex(
        centroids, pq, rotation, keep_raw=bool(keep_raw), nprobe=nprobe, refine=refine
    )
    index.restore(ids, cells, codes, raw)
    return index
