"""Partial prototype collapse detection.

Prototypes are grouped by a greedy first-fit scan in index order: each
prototype joins the first representative within cosine distance ``epsilon``,
or becomes a new representative.  The grouping is deterministic but depends
on the scan order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from .errors import DimensionMismatch, EpsilonNegative, StaleReport
from .head import PrototypeBank, head_logits, mlcd

DEFAULT_EPSILON = 0.025


@dataclass
class CollapseReport:
    epsilon: float
    K: int
    M: int
    representatives: list[int]
    assignment: np.ndarray  # prototype k -> partition index m (0-based)
    redundancy: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "K": self.K,
            "M": self.M,
            "scan_order": "index",
            "representatives": list(self.representatives),
            "assignment": [int(a) for a in self.assignment],
            "redundancy": list(self.redundancy),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CollapseReport":
        return cls(
            epsilon=float(d["epsilon"]),
            K=int(d["K"]),
            M=int(d["M"]),
            representatives=[int(r) for r in d["representatives"]],
            assignment=np.asarray(d["assignment"], dtype=int),
            redundancy=[int(r) for r in d["redundancy"]],
        )


def detect_partial_collapse(prototypes, epsilon: float = DEFAULT_EPSILON) -> CollapseReport:
    if epsilon < 0:
        raise EpsilonNegative(f"epsilon must be >= 0, got {epsilon}")
    mu = np.asarray(prototypes, dtype=np.float64)
    K = mu.shape[0]
    reps: list[int] = []
    assignment = np.empty(K, dtype=int)
    for k in range(K):
        if reps:
            close = np.flatnonzero(1.0 - mu[reps] @ mu[k] < epsilon)
            if close.size:
                assignment[k] = close[0]
                continue
        assignment[k] = len(reps)
        reps.append(k)
    redundancy = np.bincount(assignment, minlength=len(reps)).tolist()
    return CollapseReport(float(epsilon), K, len(reps), reps, assignment, redundancy)


def unique_count(prototypes, epsilon: float = DEFAULT_EPSILON) -> int:
    return detect_partial_collapse(prototypes, epsilon).M


def unique_count_curve(prototypes, epsilon_list) -> list[tuple[float, int]]:
    eps = [float(e) for e in epsilon_list]
    if any(b < a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilon values must be ascending")
    return [(e, unique_count(prototypes, e)) for e in eps]


def reassign_to_unique(bank: PrototypeBank, report: CollapseReport, batch, temp: float) -> np.ndarray:
    """Posterior over the ``M`` representatives only, renormalized."""
    if report.K != bank.K:
        raise StaleReport(f"report covers K={report.K} prototypes, bank has K={bank.K}")
    logits = head_logits(bank, batch, temp)[:, report.representatives]
    return np.exp(log_softmax(logits, axis=1))


def mass_by_redundancy(reassigned, report: CollapseReport) -> dict[int, float]:
    """Mean reassigned MLCD mass of representatives sharing a redundancy factor."""
    reassigned = np.asarray(reassigned)
    if reassigned.shape[1] != report.M:
        raise DimensionMismatch(f"expected {report.M} columns, got {reassigned.shape[1]}")
    mass = mlcd(reassigned)
    r = np.asarray(report.redundancy)
    return {int(v): float(mass[r == v].mean()) for v in np.unique(r)}
