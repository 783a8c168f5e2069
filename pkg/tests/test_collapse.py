import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protolab.collapse import (
    CollapseReport,
    detect_partial_collapse,
    mass_by_redundancy,
    reassign_to_unique,
    unique_count_curve,
)
from protolab.errors import EpsilonNegative, StaleReport
from protolab.geometry import cosine_distance
from protolab.head import PrototypeBank, posterior

from conftest import random_unit


def planted_clusters(rng, sizes, d=16):
    """Tight clusters around mutually far-apart centers (cos-dist > 0.5 between, < 0.01 within)."""
    while True:
        centers = random_unit(rng, len(sizes), d)
        gram = centers @ centers.T
        np.fill_diagonal(gram, -1)
        if gram.max() < 0.45:
            break
    rows, labels = [], []
    for c, n in enumerate(sizes):
        pts = centers[c] + 0.01 * rng.standard_normal((n, d))
        rows.append(pts / np.linalg.norm(pts, axis=1, keepdims=True))
        labels += [c] * n
    order = rng.permutation(sum(sizes))
    return np.vstack(rows)[order], np.array(labels)[order]


SIZES = [30, 20, 15, 12, 10, 8, 5]


def test_planted_seven_clusters(rng):
    mu, labels = planted_clusters(rng, SIZES)
    for c in range(7):
        m = mu[labels == c]
        assert (1 - m @ m.T).max() < 0.01
    rep = detect_partial_collapse(mu, 0.025)
    assert rep.M == 7
    planted_size = {c: n for c, n in enumerate(SIZES)}
    assert sorted(rep.redundancy) == sorted(SIZES)
    for m, r in enumerate(rep.representatives):
        assert rep.redundancy[m] == planted_size[labels[r]]
        np.testing.assert_array_equal(labels[rep.assignment == m], labels[r])
    for eps, M in unique_count_curve(mu, [0.02, 0.05, 0.1, 0.3, 0.5]):
        assert M == 7


def test_strict_epsilon_keeps_everything(rng):
    mu = random_unit(rng, 10, 4)
    rep = detect_partial_collapse(mu, 0.0)
    assert rep.M == 10 and rep.redundancy == [1] * 10
    assert detect_partial_collapse(mu, 1e-9).M == 10


def test_duplicate_grouping():
    a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    rep = detect_partial_collapse(np.array([a, a, b]), 0.025)
    assert rep.M == 2 and rep.redundancy == [2, 1]
    assert rep.representatives == [0, 2]
    np.testing.assert_array_equal(rep.assignment, [0, 0, 1])


def test_curve_extremes(rng):
    mu = random_unit(rng, 9, 3)
    assert unique_count_curve(mu, [0, 2]) == [(0.0, 9), (2.0, 1)]
    with pytest.raises(ValueError):
        unique_count_curve(mu, [0.5, 0.1])


def test_negative_epsilon():
    with pytest.raises(EpsilonNegative):
        detect_partial_collapse(np.eye(2), -0.1)


def test_report_round_trip(rng):
    rep = detect_partial_collapse(random_unit(rng, 20, 2), 0.05)
    back = CollapseReport.from_dict(rep.to_dict())
    assert back.M == rep.M and back.representatives == rep.representatives
    np.testing.assert_array_equal(back.assignment, rep.assignment)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.floats(0, 2), min_size=2, max_size=6))
def test_detector_invariants(seed, eps_list):
    g = np.random.default_rng(seed)
    mu = random_unit(g, 40, 3)
    eps_list = sorted(eps_list)
    curve = unique_count_curve(mu, eps_list)
    Ms = [M for _, M in curve]
    assert all(a >= b for a, b in zip(Ms, Ms[1:]))
    for eps in eps_list:
        rep = detect_partial_collapse(mu, eps)
        assert sum(rep.redundancy) == rep.K == 40
        for k, m in enumerate(rep.assignment):
            assert cosine_distance(mu[k], mu[rep.representatives[m]]) < eps or k == rep.representatives[m]


def test_reassign_without_collapse_is_posterior(rng):
    bank = PrototypeBank(random_unit(rng, 6, 4))
    rep = detect_partial_collapse(bank.raw_weights, 0.0)
    y = random_unit(rng, 5, 4)
    np.testing.assert_allclose(reassign_to_unique(bank, rep, y, 0.1), posterior(bank, y, 0.1), atol=1e-15)


def test_reassign_single_partition(rng):
    bank = PrototypeBank(np.array([[0.6, 0.8], [0.6, 0.8]]))
    rep = detect_partial_collapse(bank.raw_weights)
    np.testing.assert_array_equal(reassign_to_unique(bank, rep, random_unit(rng, 3, 2), 0.1), np.ones((3, 1)))


def test_reassign_symmetric_pairs():
    a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    bank = PrototypeBank(np.array([a, a, b, b]))
    rep = detect_partial_collapse(bank.raw_weights)
    y = np.array([[1.0, 1.0]]) / np.sqrt(2)
    np.testing.assert_allclose(reassign_to_unique(bank, rep, y, 0.1), [[0.5, 0.5]], atol=1e-15)


def test_reassign_stale_report(rng):
    rep = detect_partial_collapse(random_unit(rng, 5, 3))
    with pytest.raises(StaleReport):
        reassign_to_unique(PrototypeBank(random_unit(rng, 4, 3)), rep, random_unit(rng, 2, 3), 0.1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
def test_reassign_rows_sum_to_one(seed, eps):
    g = np.random.default_rng(seed)
    bank = PrototypeBank(g.standard_normal((12, 3)) * 4)
    mu = bank.raw_weights / np.linalg.norm(bank.raw_weights, axis=1, keepdims=True)
    rep = detect_partial_collapse(mu, eps)
    p = reassign_to_unique(bank, rep, random_unit(g, 7, 3), 0.05)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_mass_by_redundancy_examples():
    uniform = CollapseReport(0.025, 4, 4, [0, 1, 2, 3], np.arange(4), [1, 1, 1, 1])
    assert mass_by_redundancy(np.full((3, 4), 0.25), uniform) == {1: pytest.approx(0.25)}
    two = CollapseReport(0.025, 4, 2, [0, 3], np.array([0, 0, 0, 1]), [3, 1])
    got = mass_by_redundancy([[0.75, 0.25]], two)
    assert got == {3: pytest.approx(0.75), 1: pytest.approx(0.25)}
