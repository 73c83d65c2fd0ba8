"""Dense volumetric types and the numeric primitives shared by the pipeline.

Element precision is float32; reductions accumulate in float64.

Tensor4 activations are plain ``(d, h, w, c)`` numpy arrays in C order, so the
linear order is channel-fastest, then width, height, depth::

    flat = ((z * h + y) * w + x) * c + k
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

DTYPE = np.float32


class ZeroNormError(ValueError):
    """Raised when normalizing a vector with no nonzero entry."""


@dataclass
class VoxelGrid:
    """Occupancy grid with values in [0, 1], stored as a (d, h, w) float32 array."""

    values: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=DTYPE)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"voxel grid must be 3-D with positive dims, got {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
            raise ValueError("voxel values must be finite and within [0, 1]")
        self.values = v

    @property
    def dims(self) -> tuple:
        return self.values.shape

    @property
    def is_cubic(self) -> bool:
        d, h, w = self.values.shape
        return d == h == w


def tensor4_index(shape, z, y, x, k) -> int:
    """Linear offset of element (z, y, x, k) in a tensor of ``shape``."""
    _, h, w, c = shape
    return ((z * h + y) * w + x) * c + k


def as_flat(v) -> np.ndarray:
    a = np.asarray(v, dtype=DTYPE).ravel()
    if a.size < 1:
        raise ValueError("flat vector must have dim >= 1")
    if not np.all(np.isfinite(a)):
        raise ValueError("flat vector entries must be finite")
    return a


def l2_normalize(v) -> np.ndarray:
    a = as_flat(v)
    norm = np.sqrt(np.dot(a.astype(np.float64), a.astype(np.float64)))
    if norm == 0.0:
        raise ZeroNormError("cannot normalize a zero vector")
    return (a / norm).astype(DTYPE)


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise version of :func:`l2_normalize` for a 2-D patch matrix."""
    x64 = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x64, x64))
    if np.any(norms == 0.0):
        raise ZeroNormError("cannot normalize a zero row; filter zero patches first")
    return (x64 / norms[:, None]).astype(DTYPE)


def element_variance(v) -> float:
    """Population variance of the entries of ``v``."""
    a = as_flat(v).astype(np.float64)
    return float(np.mean((a - a.mean()) ** 2))


def row_variances(x: np.ndarray) -> np.ndarray:
    x64 = np.asarray(x, dtype=np.float64)
    return np.mean((x64 - x64.mean(axis=1, keepdims=True)) ** 2, axis=1)


def dot(a, b) -> float:
    a = as_flat(a)
    b = as_flat(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.size} vs {b.size}")
    return float(np.dot(a.astype(np.float64), b.astype(np.float64)))
