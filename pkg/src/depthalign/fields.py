"""Containers for sparse measurements and depth normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError

__all__ = ["SparseDepth", "Normalizer"]


@dataclass
class SparseDepth:
    """Sparse metric depth ``y`` on the measured set ``mask``.

    ``values`` is a full ``(H, W)`` grid; entries off the mask are ignored
    and kept at 0.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape:
            raise DimensionError(f"values {self.values.shape} vs mask {self.mask.shape}")
        self.values = np.where(self.mask, self.values, 0.0)

    @classmethod
    def from_dense(cls, depth, mask=None) -> "SparseDepth":
        """Treat positive finite entries (optionally restricted to ``mask``) as measured."""
        depth = np.asarray(depth, dtype=np.float64)
        valid = np.isfinite(depth) & (depth > 0)
        if mask is not None:
            valid &= np.asarray(mask, dtype=bool)
        return cls(np.where(valid, depth, 0.0), valid)

    @property
    def shape(self):
        return self.values.shape

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def points(self):
        """Row indices, column indices and values of measured pixels."""
        rows, cols = np.nonzero(self.mask)
        return rows, cols, self.values[rows, cols]

    def restrict(self, keep) -> "SparseDepth":
        return SparseDepth(self.values, self.mask & np.asarray(keep, dtype=bool))

    def map_values(self, fn) -> "SparseDepth":
        return SparseDepth(np.where(self.mask, fn(self.values), 0.0), self.mask)


@dataclass(frozen=True)
class Normalizer:
    """Affine map between metric depth and the sampler's ``[-1, 1]`` range."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise ParameterError("normalizer bounds must be finite")

    @classmethod
    def fit(cls, values) -> "Normalizer":
        v = np.asarray(values, dtype=np.float64)
        v = v[np.isfinite(v)]
        if v.size == 0:
            raise ParameterError("cannot fit a normalizer to no values")
        lo, hi = float(v.min()), float(v.max())
        if hi - lo < 1e-6 * max(1.0, abs(hi)):
            hi = lo + max(1.0, abs(lo))
        return cls(lo, hi)

    @property
    def half_range(self) -> float:
        return 0.5 * (self.hi - self.lo)

    def to_unit(self, x):
        return (np.asarray(x, dtype=np.float64) - self.lo) / self.half_range - 1.0

    def from_unit(self, z):
        return (np.asarray(z, dtype=np.float64) + 1.0) * self.half_range + self.lo
