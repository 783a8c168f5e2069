"""Regularizers on the marginal latent class distribution and on vector spread.

MLCD regularizers either adjust teacher targets (Sinkhorn-Knopp, probability
or logit centering) or penalize the student batch marginal (ME-MAX).  KoLeo
terms spread a set of unit vectors by maximizing their nearest-neighbour
entropy estimate.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, logsumexp

from .errors import DuplicateVectors, InfinitePenalty, NonFinite, SingletonBatch
from .geometry import nearest_neighbors, pairwise_sq_distances

MEAN_CLAMP = 1e-30
DUPLICATE_FLOOR = 1e-12
TIE_GAP = 1e-9


class TieDetected(UserWarning):
    """Two nearest neighbours are equally close; the subgradient picks the lowest index."""


class CenterSpace(str, enum.Enum):
    LOGIT = "logit"
    PROBABILITY = "probability"


@dataclass(frozen=True)
class CenterState:
    c: np.ndarray
    momentum: float
    space: CenterSpace

    @classmethod
    def initial(cls, K: int, momentum: float = 0.9, space: CenterSpace | str = CenterSpace.PROBABILITY):
        space = CenterSpace(space)
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("center momentum must lie in [0, 1]")
        fill = -math.log(K) if space is CenterSpace.PROBABILITY else 0.0
        return cls(np.full(K, fill), float(momentum), space)


class PriorKind(str, enum.Enum):
    UNIFORM = "uniform"
    POWER_LAW = "power_law"


@dataclass(frozen=True)
class PriorDistribution:
    kind: PriorKind
    K: int
    alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", PriorKind(self.kind))
        if self.K < 1:
            raise ValueError("prior needs K >= 1")
        if self.kind is PriorKind.POWER_LAW and self.alpha <= 0:
            raise ValueError("power-law exponent must be positive")

    @property
    def probs(self) -> np.ndarray:
        if self.kind is PriorKind.UNIFORM:
            return np.full(self.K, 1.0 / self.K)
        p = np.arange(1, self.K + 1, dtype=np.float64) ** (-self.alpha)
        return p / p.sum()


# -- target adjustment -------------------------------------------------------


def sinkhorn_adjust(logits, iters: int = 3) -> np.ndarray:
    """Alternate batch-axis and class-axis normalization of ``exp(logits)``.

    Runs in the log domain; the last step normalizes over classes so every
    output row is a distribution.
    """
    if iters < 1:
        raise ValueError("sinkhorn needs at least one iteration")
    q = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise NonFinite("non-finite logits passed to sinkhorn_adjust")
    for _ in range(iters):
        q = q - logsumexp(q, axis=0, keepdims=True)
        q = q - logsumexp(q, axis=1, keepdims=True)
    if not np.all(np.isfinite(q)):
        raise NonFinite("sinkhorn iteration produced non-finite values")
    return np.exp(q)


def probability_center_update(state: CenterState, dist) -> CenterState:
    col_mean = np.maximum(np.asarray(dist, dtype=np.float64).mean(axis=0), MEAN_CLAMP)
    m = state.momentum
    return CenterState(m * state.c + (1.0 - m) * np.log(col_mean), m, state.space)


def logit_center_update(state: CenterState, logits) -> CenterState:
    m = state.momentum
    mean = np.asarray(logits, dtype=np.float64).mean(axis=0)
    return CenterState(m * state.c + (1.0 - m) * mean, m, state.space)


def center_update(state: CenterState, logits) -> CenterState:
    """Update ``state`` from raw teacher logits in whichever space it tracks."""
    if state.space is CenterSpace.PROBABILITY:
        return probability_center_update(state, np.exp(log_softmax(logits, axis=1)))
    return logit_center_update(state, logits)


def apply_center(state: CenterState, logits) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits, dtype=np.float64) - state.c, axis=1))


# -- prior matching ------------------------------------------------------------


def me_max_penalty(mean_probs, prior: PriorDistribution) -> float:
    """KL(mean_probs || prior), with 0 log 0 = 0."""
    p = np.asarray(mean_probs, dtype=np.float64)
    pi = prior.probs
    support = p > 0
    if np.any(pi[support] <= 0):
        raise InfinitePenalty("mass on a class with zero prior probability")
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(pi[support]))))


def me_max_grad(mean_probs, prior: PriorDistribution) -> np.ndarray:
    """Gradient of :func:`me_max_penalty` with respect to ``mean_probs``."""
    p = np.maximum(np.asarray(mean_probs, dtype=np.float64), MEAN_CLAMP)
    return np.log(p) + 1.0 - np.log(prior.probs)


# -- KoLeo ---------------------------------------------------------------------


def koleo_entropy(vectors) -> float:
    """Negative mean log nearest-neighbour distance; smaller means more spread."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 2:
        raise SingletonBatch("KoLeo needs at least two vectors")
    d, _ = nearest_neighbors(v)
    if np.any(d <= DUPLICATE_FLOOR):
        raise DuplicateVectors("duplicate vectors give zero nearest-neighbour distance")
    return float(-np.mean(np.log(d)))


def koleo_partitions(n: int, partition_size: int, rng_seed) -> list[np.ndarray]:
    """Random disjoint index chunks of ``partition_size``; a leftover single index joins the last chunk."""
    if partition_size < 2:
        raise ValueError("partition_size must be >= 2")
    if n < partition_size:
        raise ValueError("need at least partition_size vectors")
    perm = np.random.default_rng(rng_seed).permutation(n)
    chunks = [perm[i : i + partition_size] for i in range(0, n, partition_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def koleo_entropy_batched(vectors, partition_size: int, rng_seed) -> float:
    """Sum of :func:`koleo_entropy` over random disjoint partitions."""
    v = np.asarray(vectors, dtype=np.float64)
    if partition_size >= len(v):
        return koleo_entropy(v)
    return float(sum(koleo_entropy(v[idx]) for idx in koleo_partitions(len(v), partition_size, rng_seed)))


def _tied_rows(v: np.ndarray) -> np.ndarray:
    d2 = pairwise_sq_distances(v)
    np.fill_diagonal(d2, np.inf)
    if len(v) < 3:
        return np.zeros(0, dtype=int)
    two = np.partition(np.sqrt(d2), 1, axis=1)[:, :2]
    rows = np.flatnonzero(two[:, 1] - two[:, 0] < TIE_GAP)
    tied = set(rows.tolist())
    for r in rows:
        tied.update(np.flatnonzero(np.sqrt(d2[r]) - two[r, 0] < TIE_GAP).tolist())
    return np.array(sorted(tied), dtype=int)


def koleo_value_and_grad(vectors) -> tuple[float, np.ndarray, np.ndarray]:
    """Value, gradient and the indices of rows involved in nearest-neighbour ties."""
    v = np.asarray(vectors, dtype=np.float64)
    n = len(v)
    d, nn = nearest_neighbors(v)
    if np.any(d <= DUPLICATE_FLOOR):
        raise DuplicateVectors("duplicate vectors give zero nearest-neighbour distance")
    step = (v - v[nn]) / (d * d)[:, None] / n
    grad = -step
    np.add.at(grad, nn, step)
    return float(-np.mean(np.log(d))), grad, _tied_rows(v)


def koleo_gradient(vectors) -> np.ndarray:
    _, grad, ties = koleo_value_and_grad(vectors)
    if len(ties):
        warnings.warn(f"nearest-neighbour tie among rows {ties.tolist()}", TieDetected, stacklevel=2)
    return grad


def koleo_batched_value_and_grad(vectors, partition_size: int, rng_seed):
    v = np.asarray(vectors, dtype=np.float64)
    if partition_size >= len(v):
        return koleo_value_and_grad(v)
    total, grad, ties = 0.0, np.zeros_like(v), []
    for idx in koleo_partitions(len(v), partition_size, rng_seed):
        val, g, t = koleo_value_and_grad(v[idx])
        total += val
        grad[idx] += g
        ties.append(idx[t])
    return total, grad, np.sort(np.concatenate(ties)).astype(int)


def koleo_data_loss(batch) -> float:
    """KoLeo applied to a batch of embeddings instead of prototypes."""
    return koleo_entropy(batch)
