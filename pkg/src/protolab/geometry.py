"""Unit-sphere primitives: normalization, cosine distance, nearest neighbours."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateVector, DimensionMismatch, SingletonBatch

NORM_FLOOR = 1e-12


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` (a vector, or a matrix row-wise) to unit Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms <= NORM_FLOOR):
        raise DegenerateVector(f"cannot normalize vector with norm <= {NORM_FLOOR}")
    return v / norms


def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(1.0 - a @ b)


def pairwise_sq_distances(x: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between all rows of ``x``.

    Computed from explicit differences rather than the Gram expansion so that
    exact duplicates give exactly zero.
    """
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def nearest_neighbors(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For every row, the distance to and index of its nearest other row.

    Ties resolve to the lowest index (``argmin`` returns the first hit).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise SingletonBatch("need at least two rows for nearest-neighbour search")
    d2 = pairwise_sq_distances(x)
    np.fill_diagonal(d2, np.inf)
    idx = np.argmin(d2, axis=1)
    dist = np.sqrt(d2[np.arange(len(x)), idx])
    return dist, idx


def min_pairwise_euclidean(batch, index: int) -> tuple[float, int]:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] < 2:
        raise SingletonBatch("need at least two rows for nearest-neighbour search")
    diff = batch - batch[index]
    d2 = np.einsum("ij,ij->i", diff, diff)
    d2[index] = np.inf
    j = int(np.argmin(d2))
    return float(np.sqrt(d2[j])), j
