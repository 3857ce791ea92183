import csv
import math
import warnings

import numpy as np
import pytest
from scipy import integrate, signal

from qrngcert.dsp import (
    DEFAULT_CUTOFF_HZ,
    FlatPhaseWarning,
    NoToneDetected,
    QuadratureSeries,
    TraceRecord,
    correlation_length,
    downmix,
    downsample,
    estimate_amplitude,
    estimate_dlo_offset,
    fir_lowpass,
    lowpass_taps,
    normalize,
    optimal_phase,
    process_dataset,
    psd,
    read_trc,
    shot_noise_level,
    truncation_fraction,
    write_histogram_csv,
    write_trc,
)
from qrngcert.quadrature import fixed_width_bins
from qrngcert.simulate import SimConfig, simulate_dataset, simulate_trace

FS, FMOD = 50e6, 6e6


def tone_trace(freq, amp=10000.0, phase=0.0, n=200_000):
    t = np.arange(n) / FS
    return TraceRecord(np.rint(amp * np.cos(2 * np.pi * freq * t + phase)).astype(np.int16), FS, FMOD)


@pytest.fixture(scope="module")
def offset_trace():
    return simulate_trace(SimConfig(alpha_true=2.0, seed=3, n_samples=400_000, df_hz=250.0, phase=1.1))


def test_dc_gain_is_unity():
    assert lowpass_taps(DEFAULT_CUTOFF_HZ, FS).sum() == pytest.approx(1.0, abs=1e-15)
    out = fir_lowpass(np.full(20_000, 3.5), DEFAULT_CUTOFF_HZ, FS)
    np.testing.assert_allclose(out, 3.5, atol=1e-12)


def test_stopband_attenuation_at_twice_cutoff():
    h = lowpass_taps(DEFAULT_CUTOFF_HZ, FS)
    _, resp = signal.freqz(h, worN=[2 * DEFAULT_CUTOFF_HZ], fs=FS)
    # forward-backward filtering squares the magnitude response
    assert 20 * np.log10(abs(resp[0]) ** 2) <= -40
    t = np.arange(100_000) / FS
    x = np.cos(2 * np.pi * 2 * DEFAULT_CUTOFF_HZ * t)
    y = fir_lowpass(x, DEFAULT_CUTOFF_HZ, FS)[2000:-2000]
    assert 20 * np.log10(np.std(y) / np.std(x)) <= -40


def test_zero_phase():
    x = np.zeros(20_001)
    x[10_000] = 1.0
    y = fir_lowpass(x, DEFAULT_CUTOFF_HZ, FS)
    assert int(np.argmax(y)) == 10_000
    np.testing.assert_allclose(y[10_000 - 400:10_000], y[10_001:10_401][::-1], atol=1e-15)
    rng = np.random.default_rng(0)
    z = rng.standard_normal(30_000)
    fwd = fir_lowpass(z, DEFAULT_CUTOFF_HZ, FS)
    rev = fir_lowpass(z[::-1], DEFAULT_CUTOFF_HZ, FS)[::-1]
    np.testing.assert_allclose(fwd[3000:-3000], rev[3000:-3000], atol=1e-12)


def test_short_signal_rejected():
    with pytest.raises(ValueError):
        fir_lowpass(np.zeros(1000), DEFAULT_CUTOFF_HZ, FS)
    with pytest.raises(ValueError):
        lowpass_taps(30e6, FS)


def test_downmix_of_matched_cosine():
    z = downmix(tone_trace(FMOD), FMOD)[2000:-2000]
    np.testing.assert_allclose(z.real, 5000.0, rtol=1e-3)
    np.testing.assert_allclose(z.imag, 0.0, atol=5.0)


def test_downmix_phase_factors_out():
    trace = tone_trace(FMOD + 1000.0, phase=0.4)
    base = downmix(trace, FMOD, 0.0)
    np.testing.assert_allclose(downmix(trace, FMOD, 1.3), np.exp(1.3j) * base, rtol=1e-12, atol=1e-9)


@pytest.mark.parametrize("phi", [0.0, math.pi / 2, math.pi])
def test_offset_recovered_for_any_dlo_phase(offset_trace, phi):
    fit = estimate_dlo_offset(offset_trace, phi_dlo=phi)
    assert fit.offset_hz == pytest.approx(250.0, abs=1.0)
    assert fit.rounds <= 5


def test_no_tone_detected():
    shot = simulate_trace(SimConfig(alpha_true=0.0, seed=4, n_samples=100_000, shot_noise=True))
    with pytest.raises(NoToneDetected):
        estimate_dlo_offset(shot)


def test_phase_recovery():
    trace = simulate_trace(SimConfig(alpha_true=1.0, seed=5, n_samples=300_000, phase=2.2))
    phi = optimal_phase(trace, FMOD)
    assert abs((phi - 2.2 + math.pi) % (2 * math.pi) - math.pi) <= 0.01
    # the chosen phase puts the coherent displacement on the positive real axis
    z = downmix(trace, FMOD, phi)[2000:-2000]
    assert z.real.mean() > 0 and abs(z.imag.mean()) < 0.05 * z.real.mean()


def test_flat_phase_warning():
    vac = simulate_trace(SimConfig(alpha_true=0.0, seed=6, n_samples=100_000))
    with pytest.warns(FlatPhaseWarning):
        assert optimal_phase(vac, FMOD) == 0.0


def test_normalization():
    rng = np.random.default_rng(1)
    v = 37.0 * rng.standard_normal(50_000)
    snl = shot_noise_level(v)
    s = normalize(v, snl)
    assert s.values.var() == pytest.approx(0.5, rel=1e-12)
    np.testing.assert_allclose(normalize(3 * v, snl).values, 3 * s.values, rtol=1e-14)
    with pytest.raises(ValueError):
        normalize(v, 0.0)


@pytest.fixture(scope="module")
def dataset():
    shot, traces = simulate_dataset([0.0, 0.31, 0.8, 1.6], seed=11, snr_db=10.0, n_samples=500_000, phase=0.7)
    return process_dataset(shot, traces)


def test_dataset_noise_level(dataset):
    # probe variance over vacuum variance: 1 + 1/SNR, inflated by the electronic noise
    var = dataset.series[0].values.var()
    assert var == pytest.approx(0.5 * 1.1, rel=0.04)


def test_amplitude_estimates(dataset):
    est = dataset.amplitudes[1]
    assert abs(est.alpha - 0.31) <= 3 * est.stderr
    for method in ("gaussian-fit", "free-fit"):
        other = estimate_amplitude(dataset.series[1], method)
        assert abs(other.alpha - est.alpha) <= 2 * est.stderr
        assert abs(other.alpha - 0.31) <= 3 * other.stderr
    with pytest.raises(ValueError):
        estimate_amplitude(dataset.series[1], "median")


def test_amplitude_scales_with_injected_amplitude(dataset):
    true = np.array([0.0, 0.31, 0.8, 1.6])
    est = np.array([a.alpha for a in dataset.amplitudes])
    slope = float(true @ est / (true @ true))
    assert slope == pytest.approx(1.0, rel=0.01)


def test_downsample_and_truncation():
    bins = fixed_width_bins(3, 1.0)
    inside = QuadratureSeries(np.full(100, 0.05), 1.0, (0.0, 0.0))
    counts = downsample(inside, bins)
    assert counts[4] == 100 and counts.sum() == 100
    rng = np.random.default_rng(2)
    s = QuadratureSeries(rng.normal(0, 1, 10_000), 1.0, (0.0, 0.0))
    counts = downsample(s, bins)
    assert counts.sum() == 10_000
    direct = np.mean((s.values < -1.0) | (s.values >= 1.0))
    assert truncation_fraction(counts) == pytest.approx(direct, abs=1e-15)


def test_psd_properties():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(2**18)
    f, p = psd(x, sample_rate_hz=FS)
    inner = p[5:-5]
    assert np.abs(inner / inner.mean() - 1).max() < 0.5
    assert integrate.trapezoid(p, f) == pytest.approx(x.var(), rel=0.01)
    f, p = psd(x, method="periodogram", sample_rate_hz=FS)
    assert np.sum(p) * (f[1] - f[0]) == pytest.approx(x.var(), rel=0.01)
    f, p = psd(tone_trace(3.3e6))
    assert f[np.argmax(p)] == pytest.approx(3.3e6, abs=FS / 4096)
    with pytest.raises(ValueError):
        psd(x, method="fft", sample_rate_hz=FS)


def test_trace_round_trip(tmp_path):
    trace = simulate_trace(SimConfig(alpha_true=0.5, seed=9, n_samples=20_000, label="probe"))
    path = write_trc(tmp_path / "x.trc", trace)
    back = read_trc(path)
    assert np.array_equal(back.samples, trace.samples)
    assert (back.sample_rate_hz, back.f_mod_hz, back.adc_bits, back.label) == (FS, FMOD, 16, "probe")
    bad = tmp_path / "bad.trc"
    bad.write_bytes(b'{"schema": 99}\n\x00\x00')
    with pytest.raises(ValueError):
        read_trc(bad)


def test_trace_validation():
    with pytest.raises(ValueError):
        TraceRecord(np.zeros(10), FS, FMOD)
    with pytest.raises(ValueError):
        TraceRecord(np.zeros(10, dtype=int), 10e6, FMOD)
    with pytest.raises(ValueError):
        TraceRecord(np.array([40000]), FS, FMOD)


def test_histogram_csv(tmp_path):
    bins = fixed_width_bins(2, 1.0)
    path = write_histogram_csv(tmp_path / "h.csv", bins, [1, 2, 3, 4])
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["bin_center_or_edge", "count", "frequency"]
    assert [int(r[1]) for r in rows[1:]] == [1, 2, 3, 4]
    assert float(rows[4][2]) == pytest.approx(0.4)


def test_correlation_length_is_at_least_one():
    assert correlation_length(DEFAULT_CUTOFF_HZ, FS) > 1.0
