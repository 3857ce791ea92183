"""Synthetic raw ADC traces with known ground truth for the processing chain."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .dsp import DEFAULT_CUTOFF_HZ, DEFAULT_TAPS, TraceRecord, noise_gain
from .quadrature import VACUUM_VARIANCE

SHOT_LABEL = "shot-noise"
CLIP_WARNING_FRACTION = 0.10


@dataclass(frozen=True)
class SimConfig:
    """One acquisition.

    Per-sample analog noise is white with variance ``1/2`` (vacuum) plus
    ``1/(2 snr)`` (electronic), in quadrature units. ``adc_fullscale`` is the
    quadrature value mapped to the top of the code range. The tone amplitude is
    calibrated so that after low-pass downmixing and shot-noise normalization
    the quadrature mean is ``sqrt(2 eta) alpha_true``.
    """

    alpha_true: float
    seed: int
    snr_db: float = 15.0
    eta: float = 1.0
    gamma: float = 0.0
    f_mod_hz: float = 6e6
    sample_rate_hz: float = 50e6
    n_samples: int = 1_000_000
    adc_bits: int = 16
    adc_fullscale: float = 4.0
    df_hz: float = 0.0
    phase: float = 0.0
    cutoff_hz: float = DEFAULT_CUTOFF_HZ
    taps: int = DEFAULT_TAPS
    shot_noise: bool = False  # vacuum-only calibration trace, no electronic noise
    label: str = ""

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("a seed is required")
        if not (self.sample_rate_hz > 0 and self.f_mod_hz > 0):
            raise ValueError("rates must be positive")
        if self.n_samples < 10 * self.taps:
            raise ValueError("n_samples must be at least ten filter lengths")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("eta must lie in (0, 1]")
        if not self.adc_fullscale > 0:
            raise ValueError("adc_fullscale must be positive")

    @property
    def electronic_variance(self) -> float:
        if self.shot_noise or math.isinf(self.snr_db):
            return 0.0
        return VACUUM_VARIANCE / 10.0 ** (self.snr_db / 10.0)

    @property
    def tone_amplitude(self) -> float:
        """Analog tone amplitude (quadrature units) for the configured probe."""
        if self.shot_noise:
            return 0.0
        alpha = math.sqrt(self.eta) * self.alpha_true
        gain = noise_gain(self.cutoff_hz, self.sample_rate_hz, self.taps)
        return 2.0 * math.sqrt(2.0) * alpha * math.sqrt(VACUUM_VARIANCE) * math.sqrt(gain)

    @property
    def code_gain(self) -> float:
        return 2 ** (self.adc_bits - 1) / self.adc_fullscale


def apply_code_imbalance(codes: np.ndarray, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """Move a Bernoulli(gamma) share of odd codes onto the even code below.

    Outcome ``k`` receives ``gamma`` of outcome ``k + 1`` for even ``k``, the
    same bin transfer the probability-level map applies.
    """
    if gamma == 0.0:
        return codes
    odd = (codes & 1).astype(bool)
    move = odd & (rng.random(codes.shape) < gamma)
    out = codes.copy()
    out[move] -= 1
    return out


def simulate_trace(cfg: SimConfig) -> TraceRecord:
    rng = np.random.default_rng(cfg.seed)
    t = np.arange(cfg.n_samples) / cfg.sample_rate_hz
    sigma = math.sqrt(VACUUM_VARIANCE + cfg.electronic_variance)
    analog = cfg.tone_amplitude * np.cos(2.0 * np.pi * (cfg.f_mod_hz + cfg.df_hz) * t + cfg.phase)
    analog += sigma * rng.standard_normal(cfg.n_samples)
    lo, hi = -(2 ** (cfg.adc_bits - 1)), 2 ** (cfg.adc_bits - 1) - 1
    raw = np.rint(cfg.code_gain * analog)
    clipped = float(np.mean((raw < lo) | (raw > hi)))
    codes = np.clip(raw, lo, hi).astype(np.int64)
    codes = apply_code_imbalance(codes, cfg.gamma, rng)
    meta = {k: v for k, v in asdict(cfg).items()}
    meta.update(clipped_fraction=clipped, clipping_warning=clipped > CLIP_WARNING_FRACTION, rng="PCG64")
    label = cfg.label or (SHOT_LABEL if cfg.shot_noise else f"alpha={cfg.alpha_true:g}")
    dtype = np.int16 if cfg.adc_bits <= 16 else np.int32
    return TraceRecord(codes.astype(dtype), cfg.sample_rate_hz, cfg.f_mod_hz, cfg.adc_bits, label, meta)


def simulate_dataset(
    amplitudes: Sequence[float],
    seed: int,
    labels: Optional[Sequence[str]] = None,
    **settings,
) -> tuple[TraceRecord, list[TraceRecord]]:
    """A shot-noise trace plus one trace per probe amplitude, with independent seeds."""
    children = np.random.SeedSequence(seed).generate_state(len(amplitudes) + 1)
    base = SimConfig(alpha_true=0.0, seed=int(children[0]), shot_noise=True, **settings)
    shot = simulate_trace(base)
    traces = []
    for i, a in enumerate(amplitudes):
        lab = labels[i] if labels else ""
        cfg = replace(base, alpha_true=float(a), seed=int(children[i + 1]), shot_noise=False, label=lab)
        traces.append(simulate_trace(cfg))
    return shot, traces
