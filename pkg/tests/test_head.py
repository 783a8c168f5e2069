import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protolab.errors import DimensionMismatch, NumericalRange
from protolab.head import (
    HeadMode,
    PrototypeBank,
    TemperatureSchedule,
    head_logits,
    kappa_of,
    log_bessel_iv,
    log_vmf_norm_const,
    mlcd,
    normalized_prototypes,
    posterior,
)

from conftest import random_unit

mpmath.mp.dps = 40


def bessel_series(nu, kappa):
    """Ascending series sum_m (k/2)^(2m+nu) / (m! Gamma(m+nu+1)), summed until terms vanish."""
    x = mpmath.mpf(kappa) / 2
    total, m = mpmath.mpf(0), 0
    while True:
        term = x ** (2 * m + nu) / (mpmath.factorial(m) * mpmath.gamma(m + nu + 1))
        total += term
        if term < total * mpmath.mpf(10) ** -35:
            return total
        m += 1


def log_c_oracle(kappa, D):
    nu = D / 2 - 1
    val = mpmath.mpf(kappa) ** nu / ((2 * mpmath.pi) ** (mpmath.mpf(D) / 2) * bessel_series(nu, kappa))
    return float(mpmath.log(val))


def test_normalized_prototypes():
    bank = PrototypeBank(np.array([[2.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_array_equal(normalized_prototypes(bank), [[1, 0], [0, 1]])
    w = random_unit(np.random.default_rng(1), 4, 3)
    np.testing.assert_allclose(normalized_prototypes(PrototypeBank(w)), w, atol=1e-15)


def test_normalized_rows_have_unit_norm(rng):
    bank = PrototypeBank(rng.standard_normal((4, 3)))
    np.testing.assert_allclose(np.linalg.norm(normalized_prototypes(bank), axis=1), 1.0, atol=1e-9)


def test_kappa_rules():
    w = np.array([[2.0, 0.0], [0.0, 2.0], [1.0, 0.0]])
    plain = PrototypeBank(w)
    assert all(kappa_of(plain, k, 0.1) == pytest.approx(10.0) for k in range(3))
    vmf = PrototypeBank(w, mode=HeadMode.VMF)
    assert kappa_of(vmf, 0, 0.1) == pytest.approx(20.0)
    assert kappa_of(vmf, 0, 0.1) == kappa_of(vmf, 1, 0.1)


@pytest.mark.parametrize("kappa", [5.0, 10.0, 20.0])
def test_log_bessel_matches_series(kappa):
    exact = float(mpmath.log(bessel_series(7, kappa)))
    approx = float(log_bessel_iv(7.0, kappa))
    # relative error of I_7 itself, not of its log
    assert abs(math.expm1(approx - exact)) < 1e-6


@pytest.mark.parametrize("kappa", [5.0, 10.0, 20.0])
def test_log_norm_const_matches_series(kappa):
    assert float(log_vmf_norm_const(kappa, 16)) == pytest.approx(log_c_oracle(kappa, 16), abs=1e-6)


def test_log_norm_const_small_kappa_limit():
    a, b = float(log_vmf_norm_const(1e-3, 16)), float(log_vmf_norm_const(1e-4, 16))
    assert abs(a - b) < 1e-3
    # uniform density on S^15 is 1 / area
    area = 2 * math.pi**8 / math.gamma(8)
    assert b == pytest.approx(-math.log(area), abs=1e-6)


def test_log_norm_const_decreasing():
    ks = np.linspace(0.5, 200, 400)
    vals = log_vmf_norm_const(ks, 16)
    assert np.all(np.diff(vals) < 0)


def test_low_order_rejected():
    with pytest.raises(NumericalRange):
        log_vmf_norm_const(1.0, 8)


def test_posterior_examples():
    bank = PrototypeBank(np.array([[1.0, 0.0], [0.0, 1.0]]))
    y = np.array([[1.0, 1.0]]) / math.sqrt(2)
    np.testing.assert_allclose(posterior(bank, y, 0.1), [[0.5, 0.5]], atol=1e-15)

    same = PrototypeBank(np.tile([0.6, 0.8], (5, 1)))
    np.testing.assert_allclose(posterior(same, [[1.0, 0.0]], 0.1), np.full((1, 5), 0.2), atol=1e-15)


def test_posterior_against_explicit_softmax():
    w = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    y = np.array([[0.6, 0.8], [1.0, 0.0]])
    bank = PrototypeBank(w)
    for row, p in zip(y, posterior(bank, y, 0.5)):
        z = [2 * float(row @ wk) for wk in w]
        e = [math.exp(v) for v in z]
        np.testing.assert_allclose(p, [v / sum(e) for v in e], rtol=1e-13)


def test_posterior_dimension_mismatch():
    bank = PrototypeBank(np.eye(3))
    with pytest.raises(DimensionMismatch):
        posterior(bank, [[1.0, 0.0]], 0.1)


def test_mlcd_examples(rng):
    row = rng.dirichlet(np.ones(4))[None, :]
    np.testing.assert_array_equal(mlcd(row), row[0])
    np.testing.assert_array_equal(mlcd([[1, 0], [0, 1]]), [0.5, 0.5])
    d = rng.dirichlet(np.ones(6), size=9)
    np.testing.assert_allclose(mlcd(d), [sum(r[k] for r in d) / 9 for k in range(6)], atol=1e-15)


def test_temperature_schedule():
    s = TemperatureSchedule(0.04, 0.07, 300)
    assert s.teacher_temp(0) == 0.04
    assert s.teacher_temp(150) == pytest.approx(0.055)
    assert s.teacher_temp(300) == s.teacher_temp(10_000) == 0.07


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 5.0))
def test_posterior_rows_sum_to_one_at_large_logits(seed, temp):
    g = np.random.default_rng(seed)
    w = g.standard_normal((7, 5)) * 50
    y = random_unit(g, 6, 5)
    for mode in HeadMode:
        if mode is HeadMode.VMF:
            continue
        p = posterior(PrototypeBank(w, mode=mode, student_temp=5.0, teacher_temp=0.01), y, temp / 500)
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_plain_posterior_shift_invariant(seed, shift):
    from scipy.special import softmax

    g = np.random.default_rng(seed)
    bank = PrototypeBank(g.standard_normal((5, 4)))
    logits = head_logits(bank, random_unit(g, 3, 4), 0.1)
    np.testing.assert_allclose(softmax(logits + shift, axis=1), softmax(logits, axis=1), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.3, 3.0))
def test_vmf_equals_plain_for_equal_norms(seed, norm):
    g = np.random.default_rng(seed)
    w = random_unit(g, 6, 16) * norm
    y = random_unit(g, 4, 16)
    plain = posterior(PrototypeBank(w), y, 0.1 / norm)  # same kappa as vMF mode at temp 0.1
    vmf = posterior(PrototypeBank(w, mode=HeadMode.VMF), y, 0.1)
    np.testing.assert_allclose(vmf, plain, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lower_temperature_sharpens(seed):
    g = np.random.default_rng(seed)
    bank = PrototypeBank(g.standard_normal((5, 3)))
    y = random_unit(g, 4, 3)
    hot, cold = posterior(bank, y, 0.2), posterior(bank, y, 0.1)
    assert np.all(cold.max(axis=1) > hot.max(axis=1))
