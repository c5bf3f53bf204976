"""Mask-free manipulation of token grids."""

from retrodiff.editkit.ecc import Alignment, Shift, apply_shift, ecc_align
from retrodiff.editkit.manip import (
    ManipPair,
    ManipResult,
    RegionMask,
    apply_manip,
    build_pairs,
    load_pairs,
    make_manip_pair,
    nearest_aligned,
    sample_region,
    save_pairs,
    train_manip,
)

__all__ = [
    "Alignment",
    "ManipPair",
    "ManipResult",
    "RegionMask",
    "Shift",
    "apply_manip",
    "apply_shift",
    "build_pairs",
    "ecc_align",
    "load_pairs",
    "make_manip_pair",
    "nearest_aligned",
    "sample_region",
    "save_pairs",
    "train_manip",
]
