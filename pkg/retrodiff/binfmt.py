"""Pack and unpack the little-endian binary artifacts written by retrodiff.

Every artifact starts with an 8-byte ASCII magic followed by fixed-width header fields
and numpy payloads. Header fields are packed with `bitstring`; payloads are raw
little-endian array bytes.
"""

from pathlib import Path

import numpy as np
from bitstring import ConstBitStream, ReadError, pack
from numpy.typing import DTypeLike

from retrodiff.errors import FormatError

MAGIC_BYTES = 8


def _le(dtype: DTypeLike) -> np.dtype:
    """Little-endian version of `dtype`."""
    return np.dtype(dtype).newbyteorder("<")


class Writer:
    """Accumulate an artifact in memory, header first."""

    def __init__(self, magic: bytes) -> None:
        if len(magic) != MAGIC_BYTES:
            raise ValueError(f"Magic must be {MAGIC_BYTES} bytes, got {magic!r}")
        self._chunks: list[bytes] = [magic]

    def u32(self, *values: int) -> "Writer":
        for value in values:
            self._chunks.append(pack("uintle:32", value).tobytes())
        return self

    def i64(self, *values: int) -> "Writer":
        for value in values:
            self._chunks.append(pack("intle:64", value).tobytes())
        return self

    def f64(self, *values: float) -> "Writer":
        for value in values:
            self._chunks.append(pack("floatle:64", value).tobytes())
        return self

    def array(self, values: np.ndarray, dtype: DTypeLike) -> "Writer":
        self._chunks.append(np.ascontiguousarray(values, dtype=_le(dtype)).tobytes())
        return self

    def text(self, value: str) -> "Writer":
        """Length-prefixed UTF-8 string."""
        data = value.encode("utf-8")
        self.u32(len(data))
        self._chunks.append(data)
        return self

    def tobytes(self) -> bytes:
        return b"".join(self._chunks)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.tobytes())


class Reader:
    """Sequentially read an artifact written by `Writer`.

    Args:
        data: The artifact bytes.
        magic: The expected magic.
        error: Exception type raised for any malformed content.
    """

    def __init__(
        self, data: bytes, magic: bytes, error: type[FormatError] = FormatError
    ) -> None:
        self._stream = ConstBitStream(bytes=data)
        self._error = error
        found = self._read("bytes:8") if len(data) >= MAGIC_BYTES else data
        if found != magic:
            raise error(f"Bad magic: expected {magic!r}, got {found!r}")

    @classmethod
    def open(
        cls, path: str | Path, magic: bytes, error: type[FormatError] = FormatError
    ) -> "Reader":
        return cls(Path(path).read_bytes(), magic, error)

    def _read(self, fmt: str):
        try:
            return self._stream.read(fmt)
        except ReadError as ex:
            raise self._error(f"Truncated payload reading {fmt!r}") from ex

    def u32(self) -> int:
        return self._read("uintle:32")

    def i64(self) -> int:
        return self._read("intle:64")

    def f64(self) -> float:
        return self._read("floatle:64")

    def array(self, dtype: DTypeLike, count: int) -> np.ndarray:
        dt = _le(dtype)
        nbytes = dt.itemsize * count
        if nbytes == 0:
            return np.empty(0, dtype=dt.newbyteorder("="))
        if self.remaining < nbytes:
            raise self._error(
                f"Truncated payload: need {nbytes} bytes, {self.remaining} left"
            )
        raw = self._read(f"bytes:{nbytes}")
        return np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="))

    def text(self) -> str:
        size = self.u32()
        return self._read(f"bytes:{size}").decode("utf-8")

    @property
    def remaining(self) -> int:
        """Unread bytes."""
        return (self._stream.len - self._stream.pos) // 8

    def expect_end(self) -> None:
        if self.remaining:
            raise self._error(f"{self.remaining} trailing bytes after payload")
