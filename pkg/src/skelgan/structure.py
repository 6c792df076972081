"""Skeleton-derived node descriptors: degree and per-node k-cycle counts.

The cycle enumerator is exponential in the cycle length only, so it is cheap
for molecule-sized graphs and lengths up to 8.  A compiled kernel is used
when it was built; set ``SKELGAN_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .graph import Skeleton

DEFAULT_CYCLE_LENGTHS = (3, 4, 5, 6)
MAX_CYCLE_LENGTH = 8

if os.environ.get("SKELGAN_PURE_PYTHON"):
    from ._cycles_py import count_cycles_csr as _kernel

    KERNEL = "python"
else:
    try:
        from ._cycles import count_cycles_csr as _kernel

        KERNEL = "compiled"
    except ImportError:
        from ._cycles_py import count_cycles_csr as _kernel

        KERNEL = "python"


def degrees(s: Skeleton) -> np.ndarray:
    return np.bincount(s.edges.ravel(), minlength=s.n).astype(np.int64)


def csr(s: Skeleton) -> tuple[np.ndarray, np.ndarray]:
    """Sorted CSR adjacency ``(indptr, indices)`` of a skeleton."""
    both = np.concatenate([s.edges, s.edges[:, ::-1]])
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    indptr = np.concatenate([[0], np.cumsum(np.bincount(both[:, 0], minlength=s.n))])
    return indptr.astype(np.int64), both[:, 1].astype(np.int64)


def count_cycles(s: Skeleton, lengths: Sequence[int] = DEFAULT_CYCLE_LENGTHS) -> np.ndarray:
    """Matrix ``(n, len(lengths))``: simple cycles of each length through each node.

    A cycle is counted once per node on it, regardless of direction or
    starting point.
    """
    lengths = tuple(int(k) for k in lengths)
    if any(k < 3 or k > MAX_CYCLE_LENGTH for k in lengths):
        raise ValueError(f"cycle lengths must lie in [3, {MAX_CYCLE_LENGTH}], got {lengths}")
    if not lengths:
        return np.zeros((s.n, 0), dtype=np.int64)
    indptr, indices = csr(s)
    counts = _kernel(indptr, indices, s.n, max(lengths))
    return np.ascontiguousarray(counts[:, list(lengths)])


def raw_features(s: Skeleton, lengths: Sequence[int] = DEFAULT_CYCLE_LENGTHS) -> np.ndarray:
    """``[degree, cycle counts...]`` per node as float64."""
    return np.concatenate(
        [degrees(s)[:, None], count_cycles(s, lengths)], axis=1
    ).astype(np.float64)


@dataclass
class StructScaler:
    """Per-column standardization fitted on the training split."""

    mean: np.ndarray
    std: np.ndarray
    lengths: tuple[int, ...] = DEFAULT_CYCLE_LENGTHS

    @classmethod
    def fit(cls, skeletons: Sequence[Skeleton], lengths=DEFAULT_CYCLE_LENGTHS) -> "StructScaler":
        feats = np.concatenate([raw_features(s, lengths) for s in skeletons])
        std = feats.std(axis=0)
        std[std == 0] = 1.0
        return cls(feats.mean(axis=0), std, tuple(lengths))

    @classmethod
    def identity(cls, lengths=DEFAULT_CYCLE_LENGTHS) -> "StructScaler":
        k = 1 + len(lengths)
        return cls(np.zeros(k), np.ones(k), tuple(lengths))

    @property
    def dim(self) -> int:
        return 1 + len(self.lengths)

    def transform(self, s: Skeleton) -> np.ndarray:
        return (raw_features(s, self.lengths) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "lengths": list(self.lengths)}

    @classmethod
    def from_dict(cls, d: dict) -> "StructScaler":
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float), tuple(d["lengths"]))


class StructCache:
    """Memoizes raw features by skeleton identity (edge set + lengths)."""

    def __init__(self, lengths=DEFAULT_CYCLE_LENGTHS):
        self.lengths = tuple(lengths)
        self._store: dict = {}

    def __call__(self, s: Skeleton) -> np.ndarray:
        key = (s.n, s.edges.tobytes())
        hit = self._store.get(key)
        if hit is None:
            hit = self._store[key] = raw_features(s, self.lengths)
        return hit
