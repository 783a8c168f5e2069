"""von Mises-Fisher mixture assignment head.

Each prototype ``w_k`` defines a mean direction ``mu_k = w_k / |w_k|`` and a
concentration ``kappa_k``.  In ``plain`` mode every component shares
``kappa = 1 / temp`` and the normalizers cancel; in ``vmf`` mode
``kappa_k = s * |w_k| / temp`` and ``log C_D(kappa_k)`` enters the logits.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import log_softmax

from .errors import DegenerateVector, DimensionMismatch, NumericalRange
from .geometry import NORM_FLOOR

MIN_BESSEL_ORDER = 5.0


class HeadMode(str, enum.Enum):
    PLAIN = "plain"
    VMF = "vmf"


@dataclass(frozen=True)
class PrototypeBank:
    raw_weights: np.ndarray
    mode: HeadMode = HeadMode.PLAIN
    kappa_scale: float = 1.0
    student_temp: float = 0.1
    teacher_temp: float = 0.04

    def __post_init__(self):
        w = np.asarray(self.raw_weights, dtype=np.float64)
        object.__setattr__(self, "raw_weights", w)
        object.__setattr__(self, "mode", HeadMode(self.mode))
        if w.ndim != 2 or w.shape[0] < 2 or w.shape[1] < 2:
            raise ValueError(f"prototype matrix must be K x D with K, D >= 2, got {w.shape}")
        if np.any(np.linalg.norm(w, axis=1) <= NORM_FLOOR):
            raise DegenerateVector("prototype with (near) zero norm")
        if self.kappa_scale <= 0 or self.student_temp <= 0 or self.teacher_temp <= 0:
            raise ValueError("kappa_scale and temperatures must be positive")
        if self.teacher_temp > self.student_temp:
            raise ValueError("teacher temperature must not exceed student temperature")

    @property
    def K(self) -> int:
        return self.raw_weights.shape[0]

    @property
    def D(self) -> int:
        return self.raw_weights.shape[1]

    def with_weights(self, w: np.ndarray) -> "PrototypeBank":
        return replace(self, raw_weights=w)


@dataclass(frozen=True)
class TemperatureSchedule:
    """Teacher temperature ramps linearly over ``warmup_steps``, then holds."""

    teacher_start: float = 0.04
    teacher_end: float = 0.07
    warmup_steps: int = 300
    student_temp: float = 0.1

    def teacher_temp(self, step: int) -> float:
        if self.warmup_steps <= 0 or step >= self.warmup_steps:
            return self.teacher_end
        frac = step / self.warmup_steps
        return self.teacher_start + frac * (self.teacher_end - self.teacher_start)


def normalized_prototypes(bank: PrototypeBank) -> np.ndarray:
    w = bank.raw_weights
    norms = np.linalg.norm(w, axis=1, keepdims=True)
    if np.any(norms <= NORM_FLOOR):
        raise DegenerateVector("prototype with (near) zero norm")
    return w / norms


def kappas(bank: PrototypeBank, temp: float) -> np.ndarray:
    """Concentration of every component at temperature ``temp``."""
    if bank.mode is HeadMode.PLAIN:
        return np.full(bank.K, 1.0 / temp)
    return bank.kappa_scale * np.linalg.norm(bank.raw_weights, axis=1) / temp


def kappa_of(bank: PrototypeBank, k: int, temp: float) -> float:
    return float(kappas(bank, temp)[k])


# Uniform asymptotic expansion of I_nu(nu z): polynomial coefficients of
# u_1..u_4 in t = 1 / sqrt(1 + z^2), lowest power first.
_U_POLYS = [
    np.polynomial.Polynomial([0, 3, 0, -5]) / 24,
    np.polynomial.Polynomial([0, 0, 81, 0, -462, 0, 385]) / 1152,
    np.polynomial.Polynomial([0, 0, 0, 30375, 0, -369603, 0, 765765, 0, -425425]) / 414720,
    np.polynomial.Polynomial(
        [0, 0, 0, 0, 4465125, 0, -94121676, 0, 349922430, 0, -446185740, 0, 185910725]
    ) / 39813120,
]
_U_DERIVS = [p.deriv() for p in _U_POLYS]


def _check_order(nu: float) -> None:
    if nu < MIN_BESSEL_ORDER:
        raise NumericalRange(
            f"asymptotic Bessel expansion needs order >= {MIN_BESSEL_ORDER} (dimension >= 12), got {nu}"
        )


def log_bessel_iv(nu: float, kappa) -> np.ndarray:
    """``log I_nu(kappa)`` via the large-order uniform expansion."""
    _check_order(nu)
    kappa = np.asarray(kappa, dtype=np.float64)
    z = kappa / nu
    s = np.sqrt(1.0 + z * z)
    t = 1.0 / s
    eta = s + np.log(z / (1.0 + s))
    series = 1.0 + sum(p(t) / nu ** (i + 1) for i, p in enumerate(_U_POLYS))
    return nu * eta - 0.5 * math.log(2 * math.pi * nu) - 0.5 * np.log(s) + np.log(series)


def dlog_bessel_iv(nu: float, kappa) -> np.ndarray:
    """Exact derivative in ``kappa`` of :func:`log_bessel_iv`."""
    _check_order(nu)
    kappa = np.asarray(kappa, dtype=np.float64)
    z = kappa / nu
    s = np.sqrt(1.0 + z * z)
    t = 1.0 / s
    series = 1.0 + sum(p(t) / nu ** (i + 1) for i, p in enumerate(_U_POLYS))
    dseries_dt = sum(p(t) / nu ** (i + 1) for i, p in enumerate(_U_DERIVS))
    dt_dz = -z * t**3
    dz = nu * s / z - 0.5 * z / (s * s) + dseries_dt * dt_dz / series
    return dz / nu


def log_vmf_norm_const(kappa, D: int) -> np.ndarray:
    """Log normalizer of the vMF density on the unit sphere in R^D."""
    nu = D / 2.0 - 1.0
    kappa = np.asarray(kappa, dtype=np.float64)
    return nu * np.log(kappa) - (D / 2.0) * math.log(2 * math.pi) - log_bessel_iv(nu, kappa)


def dlog_vmf_norm_const(kappa, D: int) -> np.ndarray:
    nu = D / 2.0 - 1.0
    kappa = np.asarray(kappa, dtype=np.float64)
    return nu / kappa - dlog_bessel_iv(nu, kappa)


def head_logits(bank: PrototypeBank, y: np.ndarray, temp: float) -> np.ndarray:
    """Unnormalized log-posterior ``kappa_k <mu_k, y_b> (+ log C(kappa_k))``."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if y.shape[1] != bank.D:
        raise DimensionMismatch(f"embedding dim {y.shape[1]} != prototype dim {bank.D}")
    mu = normalized_prototypes(bank)
    kap = kappas(bank, temp)
    logits = (y @ mu.T) * kap
    if bank.mode is HeadMode.VMF:
        logits = logits + log_vmf_norm_const(kap, bank.D)
    return logits


def posterior(bank: PrototypeBank, batch, temp: float) -> np.ndarray:
    return np.exp(log_softmax(head_logits(bank, batch, temp), axis=1))


def mlcd(dist) -> np.ndarray:
    """Marginal latent class distribution: the column mean of a batch of rows."""
    return np.asarray(dist, dtype=np.float64).mean(axis=0)


def check_distribution(dist, atol: float = 1e-9) -> None:
    dist = np.asarray(dist)
    if dist.ndim != 2:
        raise ValueError("latent distribution must be B x K")
    if np.any(dist < 0) or np.any(dist > 1 + atol):
        raise ValueError("probabilities outside [0, 1]")
    if not np.allclose(dist.sum(axis=1), 1.0, rtol=0, atol=atol):
        raise ValueError("rows do not sum to one")
