"""Adaptive percentile clipping of hidden features.

A FIFO memory bank of recent vectors supplies per-dimension percentile
thresholds; values outside the [q, 1-q] band are truncated.  Clipping is
applied to sentence embeddings before Gram construction and, in proxy mode,
to step states before amplification estimation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

DEFAULT_CAPACITY = 3000
DEFAULT_QUANTILE = 0.002


class InsufficientDataError(ValueError):
    """The bank does not hold enough vectors to estimate thresholds."""


@dataclass
class ClipThresholds:
    """Per-dimension truncation band [lo, hi] at empirical quantile q."""

    lo: np.ndarray
    hi: np.ndarray
    quantile: float


class MemoryBank:
    """Fixed-capacity FIFO ring buffer of d-dimensional vectors."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY, dim: Optional[int] = None):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.dim = dim
        self._buffer: Optional[np.ndarray] = None
        self._next = 0
        self.count = 0

    def snapshot(self) -> np.ndarray:
        """Current contents as a (count, d) matrix, oldest first."""
        if self._buffer is None or self.count == 0:
            raise InsufficientDataError("memory bank is empty")
        if self.count < self.capacity:
            return self._buffer[: self.count].copy()
        return np.roll(self._buffer, -self._next, axis=0).copy()


def update_bank(bank: MemoryBank, vectors: np.ndarray) -> MemoryBank:
    """Append vectors to the bank, evicting oldest entries beyond capacity."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if not np.all(np.isfinite(vectors)):
        raise ValueError("bank update contains non-finite entries")
    if bank.dim is None:
        bank.dim = vectors.shape[1]
    if vectors.shape[1] != bank.dim:
        raise ValueError(f"dimension mismatch: bank d={bank.dim}, got {vectors.shape[1]}")
    if bank._buffer is None:
        bank._buffer = np.empty((bank.capacity, bank.dim))
    # Only the trailing `capacity` vectors can survive.
    if vectors.shape[0] > bank.capacity:
        vectors = vectors[-bank.capacity :]
    n = vectors.shape[0]
    end = bank._next + n
    if end <= bank.capacity:
        bank._buffer[bank._next : end] = vectors
    else:
        first = bank.capacity - bank._next
        bank._buffer[bank._next :] = vectors[:first]
        bank._buffer[: end - bank.capacity] = vectors[first:]
    bank._next = end % bank.capacity
    bank.count = min(bank.count + n, bank.capacity)
    return bank


def compute_thresholds(bank: MemoryBank, q: float = DEFAULT_QUANTILE) -> ClipThresholds:
    """Nearest-rank per-dimension quantile thresholds from the bank.

    lo is the ceil(q*n)-th smallest value per column, hi the
    ceil((1-q)*n)-th; no interpolation, so thresholds are always observed
    values.
    """
    if not 0.0 < q < 0.5:
        raise ValueError(f"quantile must be in (0, 0.5), got {q}")
    if bank.count < 2:
        raise InsufficientDataError(f"need at least 2 banked vectors, have {bank.count}")
    data = np.sort(bank.snapshot(), axis=0)
    n = bank.count
    lo_idx = max(math.ceil(q * n), 1) - 1
    hi_idx = max(math.ceil((1.0 - q) * n), 1) - 1
    return ClipThresholds(lo=data[lo_idx].copy(), hi=data[hi_idx].copy(), quantile=q)


def clip_features(matrix: np.ndarray, thresholds: ClipThresholds) -> tuple[np.ndarray, float]:
    """Truncate entries to the threshold band; returns (clipped, clip_fraction)."""
    x = np.asarray(matrix, dtype=np.float64)
    if x.shape[-1] != thresholds.lo.shape[0]:
        raise ValueError(
            f"dimension mismatch: data d={x.shape[-1]}, thresholds d={thresholds.lo.shape[0]}"
        )
    clipped = np.clip(x, thresholds.lo, thresholds.hi)
    clip_fraction = float(np.mean(clipped != x))
    return clipped, clip_fraction


class FeatureClipper(BaseEstimator, TransformerMixin):
    """Sklearn-style transformer wrapping the bank + percentile-clip pipeline.

    ``partial_fit`` streams vectors into the FIFO bank and refreshes the
    thresholds; ``transform`` truncates rows to the current band.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY, quantile: float = DEFAULT_QUANTILE):
        self.capacity = capacity
        self.quantile = quantile

    def fit(self, X, y=None):
        self.bank_ = MemoryBank(capacity=self.capacity)
        return self.partial_fit(X)

    def partial_fit(self, X, y=None):
        if not hasattr(self, "bank_"):
            self.bank_ = MemoryBank(capacity=self.capacity)
        update_bank(self.bank_, np.asarray(X))
        self.thresholds_ = compute_thresholds(self.bank_, q=self.quantile)
        return self

    def transform(self, X):
        if not hasattr(self, "thresholds_"):
            raise NotFittedError("FeatureClipper is not fitted yet")
        clipped, self.last_clip_fraction_ = clip_features(np.asarray(X), self.thresholds_)
        return clipped
