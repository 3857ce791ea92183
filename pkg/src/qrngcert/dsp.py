"""Raw ADC traces to normalized quadrature samples, amplitudes and coarse histograms."""
from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, signal

from .quadrature import VACUUM_VARIANCE, BinningScheme

DEFAULT_TAPS = 501
DEFAULT_CUTOFF_HZ = 1e6
TRC_SCHEMA = 1
MIN_TONE_SNR_DB = 10.0


class NoToneDetected(RuntimeError):
    pass


class FlatPhaseWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TraceRecord:
    samples: np.ndarray
    sample_rate_hz: float
    f_mod_hz: float
    adc_bits: int = 16
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("trace needs a nonempty 1-d sample array")
        if not np.issubdtype(s.dtype, np.integer):
            raise ValueError("samples must be integer ADC codes")
        lim = 2 ** (self.adc_bits - 1)
        if s.min() < -lim or s.max() >= lim:
            raise ValueError(f"samples exceed the signed {self.adc_bits}-bit range")
        if not self.sample_rate_hz > 2 * self.f_mod_hz:
            raise ValueError("sample rate must exceed twice the modulation frequency")
        s = s.astype(np.int16 if self.adc_bits <= 16 else np.int32, copy=False)
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.samples.size) / self.sample_rate_hz

    def header(self) -> dict:
        return {
            "schema": TRC_SCHEMA,
            "sample_rate_hz": self.sample_rate_hz,
            "f_mod_hz": self.f_mod_hz,
            "adc_bits": self.adc_bits,
            "label": self.label,
            **({"meta": self.meta} if self.meta else {}),
        }


def write_trc(path, trace: TraceRecord) -> Path:
    """JSON header line, newline, then little-endian int16 samples."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(json.dumps(trace.header(), sort_keys=True).encode("utf-8") + b"\n")
        fh.write(np.asarray(trace.samples, dtype="<i2").tobytes())
    return path


def read_trc(path) -> TraceRecord:
    with open(path, "rb") as fh:
        head = json.loads(fh.readline().decode("utf-8"))
        body = fh.read()
    if head.get("schema") != TRC_SCHEMA:
        raise ValueError(f"unsupported trace schema {head.get('schema')!r}")
    samples = np.frombuffer(body, dtype="<i2").astype(np.int16)
    return TraceRecord(
        samples, float(head["sample_rate_hz"]), float(head["f_mod_hz"]), int(head["adc_bits"]),
        head.get("label", ""), head.get("meta", {}),
    )


# ---------------------------------------------------------------- filtering


@lru_cache(maxsize=32)
def lowpass_taps(cutoff_hz: float, sample_rate_hz: float, taps: int = DEFAULT_TAPS) -> np.ndarray:
    if taps % 2 == 0:
        raise ValueError("number of taps must be odd")
    if not 0 < cutoff_hz < sample_rate_hz / 2:
        raise ValueError("cutoff must lie below the Nyquist frequency")
    h = signal.firwin(taps, cutoff_hz, window="hamming", fs=sample_rate_hz)
    h = h / h.sum()
    h.setflags(write=False)
    return h


def fir_lowpass(x, cutoff_hz: float, sample_rate_hz: float, taps: int = DEFAULT_TAPS) -> np.ndarray:
    """Hamming windowed-sinc low-pass applied forward and backward (zero phase)."""
    h = lowpass_taps(cutoff_hz, sample_rate_hz, taps)
    x = np.asarray(x)
    padlen = 3 * (taps - 1)
    if x.shape[-1] <= padlen:
        raise ValueError(f"signal of length {x.shape[-1]} is shorter than the {padlen}-sample padding")
    return signal.filtfilt(h, [1.0], x, padtype="odd", padlen=padlen)


@lru_cache(maxsize=32)
def composite_response(cutoff_hz: float, sample_rate_hz: float, taps: int = DEFAULT_TAPS) -> np.ndarray:
    """Impulse response of the forward-backward filter away from the trace edges."""
    h = lowpass_taps(cutoff_hz, sample_rate_hz, taps)
    g = np.convolve(h, h[::-1])
    g.setflags(write=False)
    return g


def noise_gain(cutoff_hz: float, sample_rate_hz: float, taps: int = DEFAULT_TAPS) -> float:
    """Variance gain of the forward-backward filter on white noise."""
    g = composite_response(cutoff_hz, sample_rate_hz, taps)
    return float(g @ g)


def correlation_length(cutoff_hz: float, sample_rate_hz: float, taps: int = DEFAULT_TAPS) -> float:
    """``sum_k |rho_k|`` of filtered white noise.

    For a Gaussian process no function of the samples correlates more strongly
    than the samples themselves, so dividing a sample count by this gives a
    conservative effective count for histogram and mean statistics.
    """
    g = composite_response(cutoff_hz, sample_rate_hz, taps)
    acf = signal.fftconvolve(g, g[::-1])
    return float(np.abs(acf).sum() / (g @ g))


def trim(x, taps: int = DEFAULT_TAPS) -> np.ndarray:
    """Drop ``taps - 1`` samples at each end where filter transients live."""
    m = taps - 1
    x = np.asarray(x)
    if x.shape[-1] <= 2 * m:
        raise ValueError("trace too short to trim filter transients")
    return x[..., m:-m]


# ---------------------------------------------------------------- downmixing


def _baseband(trace: TraceRecord, f_dlo_hz: float, cutoff_hz: float, taps: int) -> np.ndarray:
    v = np.asarray(trace.samples, dtype=float)
    phase = 2.0 * np.pi * f_dlo_hz * trace.times
    both = fir_lowpass(np.stack([v * np.cos(phase), v * np.sin(phase)]), cutoff_hz, trace.sample_rate_hz, taps)
    return both[0] + 1j * both[1]


def downmix(
    trace: TraceRecord,
    f_dlo_hz: float,
    phi_dlo: float = 0.0,
    cutoff_hz: float = DEFAULT_CUTOFF_HZ,
    taps: int = DEFAULT_TAPS,
) -> np.ndarray:
    """Low-passed product of the trace with ``exp(i(2 pi f t + phi))``, real and imaginary parts separately."""
    # the filter is linear, so the DLO phase factors out of both products
    return np.exp(1j * phi_dlo) * _baseband(trace, f_dlo_hz, cutoff_hz, taps)


def tone_snr_db(trace: TraceRecord, f_hz: float, search_hz: float = 50e3) -> float:
    """Peak Welch PSD within ``search_hz`` of ``f_hz`` over the median PSD, in dB."""
    f, p = psd(trace, method="welch")
    near = np.abs(f - f_hz) <= search_hz
    if not near.any():
        return -math.inf
    return float(10.0 * np.log10(p[near].max() / np.median(p)))


@dataclass
class DloFit:
    frequency_hz: float
    offset_hz: float
    rounds: int
    slopes_hz: list


def estimate_dlo_offset(
    trace: TraceRecord,
    f_init_hz: Optional[float] = None,
    phi_dlo: float = 0.0,
    cutoff_hz: float = DEFAULT_CUTOFF_HZ,
    taps: int = DEFAULT_TAPS,
    block: int = 1000,
    max_rounds: int = 5,
    tol_hz: float = 1e-3,
) -> DloFit:
    """Frequency offset of the tone from a line fit to the unwrapped baseband angle.

    The baseband signal is averaged over blocks of ``block`` samples before the
    angle is taken, which keeps unwrapping clear of noise-induced slips. The DLO
    frequency is corrected and refit until the residual slope drops below
    ``tol_hz``.
    """
    f0 = trace.f_mod_hz if f_init_hz is None else float(f_init_hz)
    snr = tone_snr_db(trace, f0)
    if snr < MIN_TONE_SNR_DB:
        raise NoToneDetected(f"tone at {f0:.6g} Hz only {snr:.1f} dB above the noise floor")
    f = f0
    slopes = []
    for n in range(1, max_rounds + 1):
        z = trim(downmix(trace, f, phi_dlo, cutoff_hz, taps), taps)
        nb = z.size // block
        zb = z[: nb * block].reshape(nb, block).mean(axis=1)
        tb = (taps - 1 + block * np.arange(nb) + 0.5 * (block - 1)) / trace.sample_rate_hz
        angle = np.unwrap(np.angle(zb))
        slope = np.polyfit(tb, angle, 1)[0]
        # the baseband phase of a tone at f + df turns at -2 pi df
        step = -slope / (2.0 * np.pi)
        slopes.append(float(step))
        f += step
        if abs(step) < tol_hz:
            break
    return DloFit(f, f - f0, n, slopes)


def _mean_baseband(trace, f_dlo_hz, cutoff_hz, taps) -> tuple[complex, float]:
    z = trim(_baseband(trace, f_dlo_hz, cutoff_hz, taps), taps)
    n_eff = z.size / correlation_length(cutoff_hz, trace.sample_rate_hz, taps)
    return complex(z.mean()), float(np.sqrt(0.5 * (z.real.var() + z.imag.var()) / n_eff))


def optimal_phase(
    trace: TraceRecord,
    f_dlo_hz: float,
    cutoff_hz: float = DEFAULT_CUTOFF_HZ,
    taps: int = DEFAULT_TAPS,
    grid: int = 64,
) -> float:
    """DLO phase in ``[0, 2 pi)`` maximizing the mean of the real baseband part.

    A ``grid``-point scan brackets the maximum and bounded Brent polishes it. A
    trace whose mean is not resolved above its statistical error returns 0
    with a :class:`FlatPhaseWarning`.
    """
    mean, err = _mean_baseband(trace, f_dlo_hz, cutoff_hz, taps)
    if abs(mean) < 3.0 * err:
        warnings.warn("baseband mean is consistent with zero; phase is undetermined", FlatPhaseWarning, stacklevel=2)
        return 0.0

    def real_mean(phi):
        return (np.exp(1j * phi) * mean).real

    phis = 2.0 * np.pi * np.arange(grid) / grid
    j = int(np.argmax(real_mean(phis)))
    step = 2.0 * np.pi / grid
    res = optimize.minimize_scalar(
        lambda p: -real_mean(p), bounds=(phis[j] - step, phis[j] + step), method="bounded", options={"xatol": 1e-10}
    )
    return float(res.x % (2.0 * np.pi))


# ---------------------------------------------------------------- quadratures


@dataclass
class QuadratureSeries:
    values: np.ndarray
    snl: float
    dlo: tuple[float, float]
    correlation: float = 1.0  # sum of |autocorrelation|; divides the sample count

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(v)):
            raise ValueError("quadrature values must be finite")
        self.values = v

    @property
    def effective_samples(self) -> float:
        return self.values.size / self.correlation


def shot_noise_level(values) -> float:
    return float(np.std(np.asarray(values, dtype=float)))


def normalize(values, snl: float, dlo=(0.0, 0.0), correlation: float = 1.0) -> QuadratureSeries:
    """Scale to vacuum units: divide by ``sqrt(2)`` times the shot-noise standard deviation."""
    if not snl > 0:
        raise ValueError("shot-noise level must be positive")
    return QuadratureSeries(np.asarray(values, dtype=float) / (math.sqrt(2.0) * snl), snl, tuple(dlo), correlation)


def quadrature_values(trace, f_dlo_hz, phi_dlo, cutoff_hz=DEFAULT_CUTOFF_HZ, taps=DEFAULT_TAPS) -> np.ndarray:
    """Trimmed real part of the downmixed trace (raw ADC units)."""
    return trim(downmix(trace, f_dlo_hz, phi_dlo, cutoff_hz, taps).real, taps)


@dataclass
class AmplitudeEstimate:
    alpha: float
    stderr: float
    method: str
    variance: Optional[float] = None


def estimate_amplitude(series: QuadratureSeries, method: str = "mean", max_iter: int = 100) -> AmplitudeEstimate:
    """Coherent amplitude of a normalized series; the quadrature mean sits at ``sqrt(2) alpha``.

    ``mean`` divides the sample mean by sqrt(2). ``gaussian-fit`` maximizes the
    likelihood of a Gaussian of vacuum variance by Newton steps on alpha.
    ``free-fit`` also frees the variance.
    """
    x = series.values
    n_eff = series.effective_samples
    var = float(x.var())
    stderr = math.sqrt(var / n_eff / 2.0)
    if method == "mean":
        return AmplitudeEstimate(float(x.mean()) / math.sqrt(2.0), stderr, method)
    if method in ("gaussian-fit", "free-fit"):
        s2 = VACUUM_VARIANCE
        alpha = 0.0
        for _ in range(max_iter):
            if method == "free-fit":
                s2 = float(np.mean((x - math.sqrt(2.0) * alpha) ** 2))
            # d/dalpha and d2/dalpha2 of sum log N(x; sqrt2 alpha, s2)
            grad = math.sqrt(2.0) * float(np.sum(x - math.sqrt(2.0) * alpha)) / s2
            hess = -2.0 * x.size / s2
            step = -grad / hess
            alpha += step
            if abs(step) < 1e-14 * max(1.0, abs(alpha)):
                break
        else:
            raise RuntimeError("amplitude fit did not converge")
        return AmplitudeEstimate(alpha, stderr, method, s2 if method == "free-fit" else None)
    raise ValueError(f"unknown method {method!r}")


def downsample(series: QuadratureSeries, bins: BinningScheme) -> np.ndarray:
    """Counts of the normalized samples in each outcome bin."""
    return np.bincount(bins.assign(series.values), minlength=bins.outcomes).astype(np.int64)


def truncation_fraction(counts) -> float:
    """Share of samples in the two open end bins."""
    c = np.asarray(counts)
    return float((c[0] + c[-1]) / c.sum())


def psd(trace, method: str = "welch", sample_rate_hz: Optional[float] = None, segment: int = 4096, overlap: float = 0.5):
    """One-sided power spectral density of a trace (or raw array with ``sample_rate_hz``)."""
    if isinstance(trace, TraceRecord):
        x, fs = np.asarray(trace.samples, dtype=float), trace.sample_rate_hz
    else:
        x, fs = np.asarray(trace, dtype=float), float(sample_rate_hz)
    if method == "welch":
        nper = min(segment, x.size)
        return signal.welch(x, fs=fs, window="hann", nperseg=nper, noverlap=int(overlap * nper), detrend="constant")
    if method == "periodogram":
        return signal.periodogram(x, fs=fs, window="boxcar", detrend="constant")
    raise ValueError(f"unknown PSD method {method!r}")


def write_histogram_csv(path, bins: BinningScheme, counts) -> Path:
    counts = np.asarray(counts)
    total = counts.sum()
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_center_or_edge", "count", "frequency"])
        for c, n in zip(bins.centers(), counts):
            w.writerow([repr(float(c)), int(n), repr(float(n / total)) if total else "0.0"])
    return path


# ---------------------------------------------------------------- datasets


@dataclass
class ProcessedDataset:
    f_dlo_hz: float
    phi_dlo: float
    snl: float
    series: list
    amplitudes: list
    dlo_fit: DloFit
    labels: list

    def counts(self, bins: BinningScheme) -> np.ndarray:
        return np.stack([downsample(s, bins) for s in self.series])


def process_dataset(
    shot: TraceRecord,
    traces: Sequence[TraceRecord],
    reference: Optional[int] = None,
    cutoff_hz: float = DEFAULT_CUTOFF_HZ,
    taps: int = DEFAULT_TAPS,
    method: str = "mean",
    workers: int = 1,
) -> ProcessedDataset:
    """Run the full chain on one shot-noise trace and the probe traces.

    The DLO frequency and phase are fitted on the ``reference`` trace (default:
    the one with the strongest tone) and shared, since all probes come from the
    same modulation source. Each trace is then downmixed and normalized to the
    shot-noise level of the equally processed shot trace.
    """
    if reference is None:
        reference = int(np.argmax([tone_snr_db(t, t.f_mod_hz) for t in traces]))
    ref = traces[reference]
    fit = estimate_dlo_offset(ref, ref.f_mod_hz, 0.0, cutoff_hz, taps)
    phi = optimal_phase(ref, fit.frequency_hz, cutoff_hz, taps)
    corr = correlation_length(cutoff_hz, shot.sample_rate_hz, taps)

    def values(t):
        return quadrature_values(t, fit.frequency_hz, phi, cutoff_hz, taps)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        raw = list(pool.map(values, [shot, *traces]))
    snl = shot_noise_level(raw[0])
    series = [normalize(v, snl, (fit.frequency_hz, phi), corr) for v in raw[1:]]
    amps = [estimate_amplitude(s, method) for s in series]
    return ProcessedDataset(fit.frequency_hz, phi, snl, series, amps, fit, [t.label for t in traces])
