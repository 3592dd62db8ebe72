import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import cosine_alpha_sigma_mp
from reactgen.core import ConfigError
from reactgen.schedule import build_cosine_schedule, log_snr, sample_training_noise_level

# frozen from a 40-digit evaluation of cos((u + 0.008) / 1.008 * pi / 2)
ALPHA_U0 = 0.99992229248097481451
SIGMA_U0 = 0.012466314595415034802
LOG_4_3 = 0.28768207245178092744
# first draw of sample_training_noise_level with default_rng(12345), T = 50
FIRST_DRAW_INDEX = 1


def test_endpoint_values_match_high_precision():
    s = build_cosine_schedule(50)
    assert s.alpha[0] == pytest.approx(ALPHA_U0, abs=1e-15)
    assert s.sigma[0] == pytest.approx(SIGMA_U0, abs=1e-12)
    a, sg = cosine_alpha_sigma_mp("0.5")
    assert s.alpha[25] == pytest.approx(float(a), abs=1e-14)
    assert s.sigma[25] == pytest.approx(float(sg), abs=1e-14)


def test_endpoint_clipping():
    s = build_cosine_schedule(50)
    assert s.alpha[-1] >= 1e-4
    assert s.sigma[0] >= 1e-4


def test_minimum_schedule():
    s = build_cosine_schedule(2)
    assert len(s.alpha) == 3
    assert np.all(np.diff(s.alpha) < 0)
    with pytest.raises(ConfigError):
        build_cosine_schedule(1)


def test_log_snr_examples():
    assert log_snr(0.3, 0.3) == 0.0
    assert log_snr(0.8, 0.6) == pytest.approx(LOG_4_3, abs=1e-15)
    assert log_snr(0.6, 0.8) == pytest.approx(-LOG_4_3, abs=1e-15)
    with pytest.raises(ValueError):
        log_snr(0.0, 0.5)
    with pytest.raises(ValueError):
        log_snr(0.5, -1.0)


@given(st.integers(2, 400))
def test_schedule_invariants(T):
    s = build_cosine_schedule(T)
    np.testing.assert_allclose(s.alpha**2 + s.sigma**2, 1.0, atol=1e-12)
    assert np.all(np.diff(s.alpha) < 0) and np.all(np.diff(s.sigma) > 0)
    assert np.all(np.diff(s.lam) < 0)
    np.testing.assert_allclose(log_snr(s.alpha, s.sigma), s.lam, atol=1e-12)
    assert np.all(s.step_sizes() > 0)
    assert list(s.denoising_indices()) == list(range(T, -1, -1))


def test_seeded_first_draw_is_frozen():
    s = build_cosine_schedule(50)
    idx, sigma = sample_training_noise_level(s, np.random.default_rng(12345))
    assert idx == FIRST_DRAW_INDEX
    assert sigma == s.sigma[idx]
    again, _ = s.sample_training_noise_level(np.random.default_rng(12345))
    assert again == idx


def _phi(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def test_histogram_matches_bin_probabilities():
    s = build_cosine_schedule(50)
    idx, _ = s.sample_training_noise_level(np.random.default_rng(0), size=100_000)
    counts = np.bincount(idx, minlength=51)
    # each index owns the Voronoi cell of -lambda on the log-noise axis
    centers = -s.lam
    edges = np.concatenate([[-np.inf], (centers[:-1] + centers[1:]) / 2, [np.inf]])
    p = np.array([_phi((edges[i + 1] + 1.2) / 1.2) - _phi((edges[i] + 1.2) / 1.2) for i in range(51)])
    expected = 100_000 * p
    big = expected >= 20
    z = (counts[big] - expected[big]) / np.sqrt(expected[big])
    assert np.all(np.abs(z) < 5)
    assert np.all(counts[big] > 0)
    # the far tail is legitimately empty: index 50 has probability far below 1e-5
    assert p[50] < 1e-6


def test_zero_scale_is_point_mass():
    s = build_cosine_schedule(50)
    idx, _ = s.sample_training_noise_level(np.random.default_rng(1), size=50, scale=0.0)
    target = int(np.argmin(np.abs(-1.2 + s.lam)))
    assert np.all(idx == target)


def test_csv_dump():
    text = build_cosine_schedule(4).to_csv().splitlines()
    assert text[0] == "i,alpha,sigma,lambda"
    assert len(text) == 6
