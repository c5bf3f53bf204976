"""Translation alignment of token grids by correlation maximization."""

from typing import NamedTuple

import numpy as np

DEFAULT_RADIUS = 2
_TIE_TOLERANCE = 1e-12


class Shift(NamedTuple):
    """Integer translation: `src[i, j]` corresponds to `ref[i - dy, j - dx]`."""

    dy: int
    dx: int


class Alignment(NamedTuple):
    """Result of `ecc_align`.

    Attributes:
        shift: Best translation of the source relative to the reference.
        score: Correlation at `shift` (0 for degenerate inputs).
        degenerate: One of the grids is constant, so no shift is identifiable.
    """

    shift: Shift
    score: float
    degenerate: bool


def _overlap(height: int, width: int, dy: int, dx: int) -> tuple[slice, slice, slice, slice]:
    """Source and reference slices of the cells where both grids are defined."""
    src_rows = slice(max(dy, 0), height + min(dy, 0))
    src_cols = slice(max(dx, 0), width + min(dx, 0))
    ref_rows = slice(max(-dy, 0), height + min(-dy, 0))
    ref_cols = slice(max(-dx, 0), width + min(-dx, 0))
    return src_rows, src_cols, ref_rows, ref_cols


def _one_hot(tokens: np.ndarray, states: int) -> np.ndarray:
    return np.eye(states)[tokens].ravel()


def correlation(src: np.ndarray, ref: np.ndarray, shift: Shift, states: int) -> float:
    """Pearson correlation of one-hot token indicators over the overlap at `shift`."""
    src_rows, src_cols, ref_rows, ref_cols = _overlap(*src.shape, *shift)
    a = _one_hot(src[src_rows, src_cols], states)
    b = _one_hot(ref[ref_rows, ref_cols], states)
    if a.size == 0 or a.std() == 0 or b.std() == 0:
        return -np.inf
    return float(np.corrcoef(a, b)[0, 1])


def ecc_align(src: np.ndarray, ref: np.ndarray, radius: int = DEFAULT_RADIUS) -> Alignment:
    """Find the translation of `src` relative to `ref` within `radius` by exhaustive search.

    Ties go to the smaller |dy| + |dx|, then to the lexicographically smaller shift.

    Args:
        src: Source tokens (H, W).
        ref: Reference tokens (H, W).
        radius: Largest |dy| and |dx| searched.

    Raises:
        ValueError: If the grids differ in shape or `radius` does not fit the grid.
    """
    src = np.asarray(src, dtype=np.int64)
    ref = np.asarray(ref, dtype=np.int64)
    if src.shape != ref.shape:
        raise ValueError(f"Cannot align grids of shapes {src.shape} and {ref.shape}")
    if not 0 <= radius < min(src.shape):
        raise ValueError(f"Radius {radius} does not fit a {src.shape} grid")
    if np.unique(src).size < 2 or np.unique(ref).size < 2:
        return Alignment(Shift(0, 0), 0.0, True)
    states = int(max(src.max(), ref.max())) + 1
    scores = {
        Shift(dy, dx): correlation(src, ref, Shift(dy, dx), states)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
    }
    best = max(scores.values())
    shift = min(
        (s for s, value in scores.items() if value >= best - _TIE_TOLERANCE),
        key=lambda s: (abs(s.dy) + abs(s.dx), s.dy, s.dx),
    )
    return Alignment(shift, scores[shift], False)


def apply_shift(src: np.ndarray, shift: Shift, fill: np.ndarray) -> np.ndarray:
    """Move `src` onto the reference frame; cells without a source come from `fill`.

    The result satisfies `out[i, j] = src[i + dy, j + dx]` wherever that cell exists.
    """
    src = np.asarray(src)
    out = np.array(fill, copy=True)
    src_rows, src_cols, ref_rows, ref_cols = _overlap(*src.shape, *shift)
    out[ref_rows, ref_cols] = src[src_rows, src_cols]
    return out
