"""Synthetic clustered data on the unit sphere and view augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import l2_normalize


@dataclass
class SyntheticDataset:
    points: np.ndarray
    labels: np.ndarray
    means: np.ndarray
    C: int
    mixing: str
    cluster_kappa: float


def _wood_radial(kappa: float, dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Sample the cosine ``w = <x, mean>`` of a vMF(kappa) draw on S^{dim-1}."""
    m = dim - 1
    b = m / (2.0 * kappa + np.sqrt(4.0 * kappa**2 + m**2))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m * np.log(1.0 - x0**2)
    out = np.empty(n)
    filled = 0
    while filled < n:
        need = n - filled
        z = rng.beta(m / 2.0, m / 2.0, size=need)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=need)
        ok = kappa * w + m * np.log(1.0 - x0 * w) - c >= np.log(u)
        got = w[ok]
        out[filled : filled + len(got)] = got
        filled += len(got)
    return out


def sample_vmf(mean, kappa: float, n: int, rng: np.random.Generator) -> np.ndarray:
    mean = l2_normalize(mean)
    dim = mean.shape[0]
    w = _wood_radial(kappa, dim, n, rng)
    v = l2_normalize(rng.standard_normal((n, dim - 1)))
    x = np.hstack([w[:, None], np.sqrt(np.clip(1.0 - w**2, 0.0, None))[:, None] * v])
    # Householder reflection taking e1 to mean
    u = -mean.copy()
    u[0] += 1.0
    un = u @ u
    if un > 1e-24:
        x = x - 2.0 * np.outer(x @ u, u) / un
    return x


def component_counts(C: int, N: int, mixing: str = "uniform", alpha: float = 1.0) -> np.ndarray:
    """Points per component; power-law mixing gives component k weight k^-alpha."""
    if mixing == "uniform":
        weights = np.ones(C)
    elif mixing == "power_law":
        weights = np.arange(1, C + 1, dtype=np.float64) ** (-alpha)
    else:
        raise ValueError(f"unknown mixing {mixing!r}")
    # every component keeps at least one point; the rest by largest remainder
    share = weights / weights.sum() * (N - C)
    counts = np.floor(share).astype(int)
    order = np.argsort(-(share - counts), kind="stable")
    counts[order[: (N - C) - counts.sum()]] += 1
    return counts + 1


def generate_dataset(
    C: int,
    N: int,
    d_in: int,
    cluster_kappa: float,
    mixing: str = "uniform",
    seed: int = 0,
    alpha: float = 1.0,
) -> SyntheticDataset:
    if C < 2 or N < C:
        raise ValueError("need C >= 2 and N >= C")
    rng = np.random.default_rng(seed)
    means = l2_normalize(rng.standard_normal((C, d_in)))
    counts = component_counts(C, N, mixing, alpha)
    points = np.vstack([sample_vmf(means[c], cluster_kappa, counts[c], rng) for c in range(C)])
    labels = np.repeat(np.arange(C), counts)
    return SyntheticDataset(points, labels, means, C, mixing, cluster_kappa)


def augment(points, noise_sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian-jittered, re-normalized copy of ``points``."""
    points = np.asarray(points, dtype=np.float64)
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    if noise_sigma == 0:
        return points.copy()
    return l2_normalize(points + noise_sigma * rng.standard_normal(points.shape))
