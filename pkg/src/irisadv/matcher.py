"""Masked Hamming matching of iris codes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import IrisCode

DEFAULT_SUBSET_SIZE = 1024


class EmptyMaskError(ValueError):
    """No jointly valid bits: a comparison cannot be decided."""


@dataclass(frozen=True)
class BitLocationSet:
    rows: np.ndarray
    cols: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        if rows.shape != cols.shape or rows.ndim != 1:
            raise ValueError("rows and cols must be 1-D arrays of equal length")
        if len(set(zip(rows.tolist(), cols.tolist()))) != rows.size:
            raise ValueError("bit locations must be unique")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)

    @property
    def count(self) -> int:
        return int(self.rows.size)

    def check_bounds(self, shape: tuple[int, int]) -> None:
        if self.count and (self.rows.min() < 0 or self.cols.min() < 0
                           or self.rows.max() >= shape[0] or self.cols.max() >= shape[1]):
            raise ValueError(f"bit locations fall outside a {shape} code")

    def as_mask(self, shape: tuple[int, int]) -> np.ndarray:
        self.check_bounds(shape)
        m = np.zeros(shape, dtype=np.uint8)
        m[self.rows, self.cols] = 1
        return m

    @classmethod
    def random(cls, shape: tuple[int, int], count: int = DEFAULT_SUBSET_SIZE,
               rng: np.random.Generator | None = None,
               exclude: "BitLocationSet | None" = None) -> "BitLocationSet":
        """Draw ``count`` distinct locations uniformly, avoiding ``exclude``."""
        rng = np.random.default_rng() if rng is None else rng
        pool = np.arange(shape[0] * shape[1])
        if exclude is not None:
            pool = np.setdiff1d(pool, exclude.rows * shape[1] + exclude.cols)
        if count > pool.size:
            raise ValueError(f"cannot draw {count} locations from {pool.size}")
        flat = np.sort(rng.choice(pool, size=count, replace=False))
        return cls(flat // shape[1], flat % shape[1])


@dataclass(frozen=True)
class MatchDecision:
    hd: float
    threshold: float
    accepted: bool
    compared_bits: int


def masked_hamming(a: IrisCode, b: IrisCode) -> tuple[float, int]:
    """Fraction of disagreeing bits over the joint code mask, and the mask size."""
    if a.shape != b.shape:
        raise ValueError(f"code shapes differ: {a.shape} vs {b.shape}")
    joint = (a.code_mask & b.code_mask).astype(bool)
    n = int(joint.sum())
    if n == 0:
        raise EmptyMaskError("codes share no valid bits")
    diff = int(((a.bits ^ b.bits).astype(bool) & joint).sum())
    return diff / n, n


def subset_hamming(a: IrisCode, b: IrisCode, v: BitLocationSet) -> tuple[float, int]:
    """Hamming fraction over the locations of ``v`` valid in both codes."""
    if a.shape != b.shape:
        raise ValueError(f"code shapes differ: {a.shape} vs {b.shape}")
    v.check_bounds(a.shape)
    r, c = v.rows, v.cols
    usable = (a.code_mask[r, c] & b.code_mask[r, c]).astype(bool)
    n = int(usable.sum())
    if n == 0:
        raise EmptyMaskError("no location of the subset is valid in both codes")
    diff = int((a.bits[r, c] != b.bits[r, c])[usable].sum())
    return diff / n, n


def verify(hd: float, threshold: float = 0.32, compared_bits: int = 1) -> MatchDecision:
    """Accept iff ``hd < threshold``; the boundary itself rejects."""
    if not 0.0 <= hd <= 1.0:
        raise ValueError(f"hamming distance {hd} outside [0, 1]")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold {threshold} outside (0, 1)")
    return MatchDecision(hd, threshold, hd < threshold, compared_bits)
