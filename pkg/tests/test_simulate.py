import math

import numpy as np
import pytest
from scipy import special

from qrngcert.dsp import process_dataset
from qrngcert.quadrature import NoiseModel, fixed_width_bins, gamma_map, outcome_probabilities
from qrngcert.simulate import SimConfig, apply_code_imbalance, simulate_dataset, simulate_trace


def test_seed_determinism():
    cfg = SimConfig(alpha_true=0.4, seed=123, n_samples=50_000, gamma=0.2)
    a, b = simulate_trace(cfg), simulate_trace(cfg)
    assert np.array_equal(a.samples, b.samples)
    other = simulate_trace(SimConfig(alpha_true=0.4, seed=124, n_samples=50_000))
    assert not np.array_equal(a.samples, other.samples)
    s1, t1 = simulate_dataset([0.0, 0.3], seed=7, n_samples=20_000)
    s2, t2 = simulate_dataset([0.0, 0.3], seed=7, n_samples=20_000)
    assert np.array_equal(s1.samples, s2.samples)
    assert all(np.array_equal(x.samples, y.samples) for x, y in zip(t1, t2))
    assert not np.array_equal(t1[0].samples, t1[1].samples)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(alpha_true=0.1, seed=None)
    with pytest.raises(ValueError):
        SimConfig(alpha_true=0.1, seed=1, gamma=1.5)
    with pytest.raises(ValueError):
        SimConfig(alpha_true=0.1, seed=1, n_samples=100)


def test_clipping_is_flagged():
    trace = simulate_trace(SimConfig(alpha_true=0.0, seed=2, n_samples=20_000, adc_fullscale=0.2))
    assert trace.meta["clipping_warning"]
    assert trace.meta["clipped_fraction"] > 0.1
    clean = simulate_trace(SimConfig(alpha_true=0.0, seed=2, n_samples=20_000))
    assert not clean.meta["clipping_warning"]


def test_code_imbalance_moves_odd_codes_down():
    rng = np.random.default_rng(0)
    codes = np.arange(-6, 6).repeat(1000)
    out = apply_code_imbalance(codes, 1.0, rng)
    assert np.all(out % 2 == 0)
    assert np.array_equal(out[codes % 2 == 0], codes[codes % 2 == 0])
    assert np.array_equal(out[codes % 2 == 1], codes[codes % 2 == 1] - 1)
    assert apply_code_imbalance(codes, 0.0, rng) is codes


def test_odd_code_share_matches_gamma_map():
    cfg = SimConfig(alpha_true=0.0, seed=21, n_samples=1_000_000, gamma=0.25, adc_bits=8, snr_db=10.0)
    trace = simulate_trace(cfg)
    sigma = math.sqrt(0.5 + cfg.electronic_variance) * cfg.code_gain
    lo, hi = -(2 ** (cfg.adc_bits - 1)), 2 ** (cfg.adc_bits - 1)
    codes = np.arange(lo, hi)
    upper = np.append(codes[1:] - 0.5, np.inf)
    lower = np.insert(codes[1:] - 0.5, 0, -np.inf)
    p = 0.5 * (special.erf(upper / (math.sqrt(2) * sigma)) - special.erf(lower / (math.sqrt(2) * sigma)))
    # codes start at an even value, so pairs (even, odd) line up with the map
    predicted = gamma_map(p, cfg.gamma)
    odd_share = predicted[1::2].sum()
    observed = np.mean(trace.samples.astype(int) % 2 == 1)
    sd = math.sqrt(odd_share * (1 - odd_share) / cfg.n_samples)
    assert abs(observed - odd_share) <= 3 * sd
    assert odd_share == pytest.approx(0.75 * 0.5, abs=1e-3)


def test_vacuum_histogram_matches_model():
    shot, traces = simulate_dataset([0.0, 1.0], seed=31, snr_db=15.0, n_samples=1_000_000)
    ds = process_dataset(shot, traces)
    bins = fixed_width_bins(3, 1.5)
    counts = ds.counts(bins)[0]
    n = counts.sum()
    p = outcome_probabilities(0.0, NoiseModel.from_snr_db(15.0), bins)
    # filtered samples are correlated: bands use the effective sample count
    n_eff = ds.series[0].effective_samples
    z = (counts / n - p) / np.sqrt(p * (1 - p) / n_eff)
    assert np.abs(z).max() <= 3.0
