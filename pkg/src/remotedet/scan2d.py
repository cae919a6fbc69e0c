"""Four deterministic 2D<->1D traversal orders and sequence fusion.

A direction maps a [C,H,W] feature map to a [H*W, C] token sequence; token t
carries the channel vector of exactly one grid cell. The four orders are
row-major, column-major, and their full reversals, so the reversal pair of the
first two gives the bidirectional subset. All index math is exact integer
permutation; flatten/unflatten round-trip bit-identically.
"""
from __future__ import annotations

from enum import Enum
from functools import lru_cache

import numpy as np

from .errors import ShapeError

Array = np.ndarray


class ScanDirection(Enum):
    ROW_MAJOR = 0
    ROW_MAJOR_REVERSE = 1
    COL_MAJOR = 2
    COL_MAJOR_REVERSE = 3


ALL_DIRECTIONS = (
    ScanDirection.ROW_MAJOR,
    ScanDirection.ROW_MAJOR_REVERSE,
    ScanDirection.COL_MAJOR,
    ScanDirection.COL_MAJOR_REVERSE,
)

# the bidirectional-scanning ablation uses only the first reversal pair
BIDIRECTIONAL = ALL_DIRECTIONS[:2]


@lru_cache(maxsize=256)
def permutation(direction: ScanDirection, h: int, w: int) -> Array:
    """Row-major grid index visited by each sequence position t in [0, H*W)."""
    if h < 1 or w < 1:
        raise ShapeError(f"grid must be at least 1x1, got {h}x{w}")
    base = np.arange(h * w)
    if direction is ScanDirection.ROW_MAJOR:
        perm = base
    elif direction is ScanDirection.ROW_MAJOR_REVERSE:
        perm = base[::-1]
    elif direction is ScanDirection.COL_MAJOR:
        perm = base.reshape(h, w).T.ravel()
    else:
        perm = base.reshape(h, w).T.ravel()[::-1]
    perm = np.ascontiguousarray(perm)
    perm.setflags(write=False)
    return perm


@lru_cache(maxsize=256)
def inverse_permutation(direction: ScanDirection, h: int, w: int) -> Array:
    perm = permutation(direction, h, w)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    inv.setflags(write=False)
    return inv


def flatten(fm: Array, direction: ScanDirection) -> Array:
    """Traverse a [C,H,W] map into a [H*W, C] token sequence."""
    if fm.ndim != 3:
        raise ShapeError(f"flatten expects [C,H,W], got shape {fm.shape}")
    c, h, w = fm.shape
    perm = permutation(direction, h, w)
    return np.ascontiguousarray(fm.reshape(c, h * w)[:, perm].T)


def unflatten(seq: Array, direction: ScanDirection, h: int, w: int) -> Array:
    """Exact inverse of :func:`flatten` for the same direction."""
    if seq.ndim != 2:
        raise ShapeError(f"unflatten expects [L,C], got shape {seq.shape}")
    if seq.shape[0] != h * w:
        raise ShapeError(
            f"sequence length {seq.shape[0]} does not match grid {h}x{w}")
    c = seq.shape[1]
    out = np.empty((c, h * w), dtype=seq.dtype)
    out[:, permutation(direction, h, w)] = seq.T
    return np.ascontiguousarray(out.reshape(c, h, w))


def fuse_sequences(a: Array, b: Array) -> Array:
    """Patch-level fusion of two same-shape token sequences by addition."""
    if a.shape != b.shape:
        raise ShapeError(f"fuse_sequences shape mismatch: {a.shape} vs {b.shape}")
    return a + b
