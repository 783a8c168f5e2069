import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ive

from protolab.data import augment, component_counts, generate_dataset, sample_vmf

from conftest import random_unit


def mean_resultant_length(kappa, d):
    """E<x, mean> under vMF(kappa) on S^{d-1}: I_{d/2}(kappa) / I_{d/2-1}(kappa)."""
    return ive(d / 2, kappa) / ive(d / 2 - 1, kappa)


def test_vmf_mean_direction(rng):
    mean = random_unit(rng, 1, 8)[0]
    x = sample_vmf(mean, 50.0, 10_000, rng)
    np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1.0, atol=1e-12)
    m = x.mean(axis=0)
    assert 1 - m @ mean / np.linalg.norm(m) < 0.01
    assert np.linalg.norm(m) == pytest.approx(mean_resultant_length(50.0, 8), abs=0.005)


@pytest.mark.parametrize("kappa,d", [(1.0, 3), (10.0, 5), (200.0, 16)])
def test_vmf_resultant_length_other_settings(rng, kappa, d):
    mean = random_unit(rng, 1, d)[0]
    x = sample_vmf(mean, kappa, 20_000, rng)
    assert float(np.mean(x @ mean)) == pytest.approx(mean_resultant_length(kappa, d), abs=0.01)


def test_concentrated_clusters():
    data = generate_dataset(4, 400, 8, 1e6, seed=3)
    cos = np.sum(data.points * data.means[data.labels], axis=1)
    assert np.all(1 - cos < 1e-3)


def test_uniform_mixing_counts():
    data = generate_dataset(8, 400, 6, 100.0, seed=1)
    np.testing.assert_array_equal(np.bincount(data.labels), [50] * 8)
    assert data.points.shape == (400, 6)


def test_power_law_counts():
    counts = component_counts(5, 1000, "power_law", 1.0)
    assert counts.sum() == 1000
    assert np.all(np.diff(counts) <= 0) and counts.min() >= 1


def test_dataset_seeded():
    a, b = generate_dataset(4, 64, 5, 30.0, seed=9), generate_dataset(4, 64, 5, 30.0, seed=9)
    np.testing.assert_array_equal(a.points, b.points)


def test_augment_zero_noise_is_identity(rng):
    p = random_unit(rng, 5, 4)
    np.testing.assert_array_equal(augment(p, 0.0, rng), p)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 3.0))
def test_augment_output_is_unit(seed, sigma):
    g = np.random.default_rng(seed)
    out = augment(random_unit(g, 6, 5), sigma, g)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


def test_augment_mean_distance_against_simulation(rng):
    p = random_unit(rng, 1, 8)[0]
    draws = augment(np.tile(p, (10_000, 1)), 0.1, rng)
    got = float(np.mean(1 - draws @ p))
    # independent simulation: cos of p + noise with p, computed without normalizing rows first
    g = np.random.default_rng(77)
    noise = 0.1 * g.standard_normal((200_000, 8))
    cos = (1 + noise @ p) / np.sqrt(np.sum((p + noise) ** 2, axis=1))
    want = float(np.mean(1 - cos))
    assert abs(got - want) <= 0.2 * want
