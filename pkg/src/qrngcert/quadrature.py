"""Outcome statistics of a noisy, binned X-quadrature measurement of coherent states.

All quadratures are in vacuum units where the vacuum variance is 1/2, so a
coherent state of real amplitude ``alpha`` has a Gaussian X distribution centred
at ``sqrt(2) * alpha``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import special

VACUUM_VARIANCE = 0.5


@dataclass(frozen=True)
class ProbeEnsemble:
    """Trusted states: the vacuum (generation state) followed by coherent probes."""

    amplitudes: tuple[float, ...]
    efficiency: float = 1.0

    def __post_init__(self):
        amps = tuple(float(a) for a in self.amplitudes)
        object.__setattr__(self, "amplitudes", amps)
        if not amps:
            raise ValueError("ensemble needs at least the generation state")
        if amps[0] != 0.0:
            raise ValueError("first amplitude must be exactly 0 (vacuum generation state)")
        if not all(math.isfinite(a) for a in amps):
            raise ValueError("amplitudes must be finite")
        if len(set(amps)) != len(amps):
            raise ValueError("amplitudes must be pairwise distinct")
        if not (0.0 < self.efficiency <= 1.0):
            raise ValueError("efficiency must lie in (0, 1]")

    @classmethod
    def equally_spaced(cls, n_states: int, alpha_max: float, efficiency: float = 1.0):
        """``n_states`` amplitudes evenly spaced on ``[0, alpha_max]``."""
        if n_states < 1:
            raise ValueError("n_states must be >= 1")
        if n_states == 1:
            return cls((0.0,), efficiency)
        return cls(tuple(np.linspace(0.0, alpha_max, n_states)), efficiency)

    @property
    def n_states(self) -> int:
        return len(self.amplitudes)

    @property
    def effective_amplitudes(self) -> np.ndarray:
        """Amplitudes after detection loss, ``sqrt(eta) * alpha``."""
        return math.sqrt(self.efficiency) * np.asarray(self.amplitudes)

    def scaled(self, r: float) -> "ProbeEnsemble":
        return ProbeEnsemble(tuple(r * a for a in self.amplitudes), self.efficiency)


@dataclass(frozen=True)
class NoiseModel:
    sigma_n: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        if not (self.sigma_n >= 0.0) or not math.isfinite(self.sigma_n):
            raise ValueError("sigma_n must be finite and >= 0")
        if not (0.0 <= self.gamma <= 1.0):
            raise ValueError("gamma must lie in [0, 1]")

    @classmethod
    def from_snr_db(cls, snr_db: float, gamma: float = 0.0) -> "NoiseModel":
        """SNR is the vacuum-to-excess variance ratio ``sigma_v**2 / sigma_n**2``."""
        if math.isinf(snr_db) and snr_db > 0:
            return cls(0.0, gamma)
        snr = 10.0 ** (snr_db / 10.0)
        return cls(math.sqrt(VACUUM_VARIANCE / snr), gamma)

    @property
    def sigma_v(self) -> float:
        return math.sqrt(VACUUM_VARIANCE)

    @property
    def sigma_t(self) -> float:
        return math.sqrt(VACUUM_VARIANCE + self.sigma_n**2)

    @property
    def snr(self) -> float:
        if self.sigma_n == 0.0:
            return math.inf
        return VACUUM_VARIANCE / self.sigma_n**2

    @property
    def snr_db(self) -> float:
        return 10.0 * math.log10(self.snr) if self.sigma_n > 0 else math.inf


@dataclass(frozen=True)
class BinningScheme:
    """``d = 2**bit_depth`` intervals ``[edges[k], edges[k+1])``.

    Outer edges are infinite. A value exactly on an edge belongs to the upper bin.
    ``kind`` is ``"fixed"`` (with ``range_r``), ``"equal-probability"`` (with
    ``sigma_t``) or ``"custom"``.
    """

    bit_depth: int
    edges: tuple[float, ...]
    kind: str = "custom"
    range_r: Optional[float] = None
    sigma_t: Optional[float] = None

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        object.__setattr__(self, "edges", edges)
        if self.bit_depth < 1:
            raise ValueError("bit_depth must be >= 1")
        if len(edges) != self.outcomes + 1:
            raise ValueError(f"expected {self.outcomes + 1} edges, got {len(edges)}")
        if edges[0] != -math.inf or edges[-1] != math.inf:
            raise ValueError("outer edges must be -inf and +inf")
        inner = np.asarray(edges[1:-1])
        if not np.all(np.isfinite(inner)):
            raise ValueError("interior edges must be finite")
        # R = 0 collapses all interior bins onto the centre; keep them as empty bins.
        if np.any(np.diff(inner) < 0) or (self.range_r != 0.0 and np.any(np.diff(inner) <= 0)):
            raise ValueError("edges must be strictly increasing")

    @property
    def outcomes(self) -> int:
        return 2**self.bit_depth

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.edges[:-1])

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.edges[1:])

    @property
    def width(self) -> Optional[float]:
        if self.kind != "fixed" or self.outcomes == 2:
            return None
        return 2.0 * self.range_r / (self.outcomes - 2)

    def centers(self) -> np.ndarray:
        """Interval midpoints; end bins are reported at their finite edge."""
        lo, hi = self.lower.copy(), self.upper.copy()
        lo[0] = hi[0]
        hi[-1] = lo[-1]
        return 0.5 * (lo + hi)

    def assign(self, values: np.ndarray) -> np.ndarray:
        """Bin index of each value (edge values go to the upper bin)."""
        inner = np.asarray(self.edges[1:-1])
        return np.searchsorted(inner, np.asarray(values), side="right")

    def describe(self) -> dict:
        return {
            "bit_depth": self.bit_depth,
            "kind": self.kind,
            "range_r": self.range_r,
            "sigma_t": self.sigma_t,
            "edges": [e if math.isfinite(e) else ("-inf" if e < 0 else "inf") for e in self.edges],
        }


def fixed_width_bins(bit_depth: int, range_r: float) -> BinningScheme:
    """Equal-width interior bins spanning ``[-R, R]`` plus two open end bins."""
    if range_r < 0 or not math.isfinite(range_r):
        raise ValueError("range must be finite and >= 0")
    d = 2**bit_depth
    if d == 2:
        inner = [0.0]
    else:
        delta = 2.0 * range_r / (d - 2)
        inner = [-range_r + j * delta for j in range(d - 1)]
        inner[-1] = range_r
    return BinningScheme(bit_depth, (-math.inf, *inner, math.inf), "fixed", range_r=float(range_r))


def equal_probability_edges(d: int, sigma_t: float) -> BinningScheme:
    """Bins that each carry probability ``1/d`` for a centred Gaussian of std ``sigma_t``."""
    if d < 2 or d & (d - 1):
        raise ValueError("d must be a power of two >= 2")
    if not sigma_t > 0:
        raise ValueError("sigma_t must be positive")
    k = np.arange(d + 1)
    edges = math.sqrt(2.0) * sigma_t * special.erfinv(2.0 * k / d - 1.0)
    edges[d // 2] = 0.0
    # mirror the lower half so the scheme is exactly symmetric
    edges[d // 2 + 1 :] = -edges[: d // 2][::-1]
    return BinningScheme(d.bit_length() - 1, tuple(edges), "equal-probability", sigma_t=float(sigma_t))


def _interval_mass(mean, sigma, lower, upper):
    """Gaussian mass of ``[lower, upper)``, using erfc in the upper tail to keep precision."""
    scale = math.sqrt(2.0) * sigma
    za = (np.asarray(lower, dtype=float) - mean) / scale
    zb = (np.asarray(upper, dtype=float) - mean) / scale
    upper_tail = za > 0
    with np.errstate(invalid="ignore"):
        direct = 0.5 * (special.erf(zb) - special.erf(za))
        tail = 0.5 * (special.erfc(za) - special.erfc(zb))
    return np.clip(np.where(upper_tail, tail, direct), 0.0, 1.0)


def outcome_probability(alpha: float, noise: NoiseModel, bins: BinningScheme, k: int) -> float:
    """Probability of outcome ``k`` for coherent amplitude ``alpha`` (already loss-scaled)."""
    if not math.isfinite(alpha):
        raise ValueError("alpha must be finite")
    if not 0 <= k < bins.outcomes:
        raise IndexError(f"outcome {k} outside [0, {bins.outcomes})")
    mass = _interval_mass(math.sqrt(2.0) * alpha, noise.sigma_t, bins.edges[k], bins.edges[k + 1])
    return float(mass)


def outcome_probabilities(alpha: float, noise: NoiseModel, bins: BinningScheme) -> np.ndarray:
    """All ``d`` outcome probabilities for one amplitude."""
    if not math.isfinite(alpha):
        raise ValueError("alpha must be finite")
    return _interval_mass(math.sqrt(2.0) * alpha, noise.sigma_t, bins.lower, bins.upper)


def gamma_map(probs: Sequence[float], gamma: float) -> np.ndarray:
    """Shift a fraction ``gamma`` of every odd outcome into the even outcome below it."""
    p = np.asarray(probs, dtype=float)
    if p.shape[-1] % 2:
        raise ValueError("gamma imbalance needs an even number of outcomes")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    out = p.copy()
    out[..., 0::2] += gamma * p[..., 1::2]
    out[..., 1::2] *= 1.0 - gamma
    return out


@dataclass
class OutcomeDistribution:
    """Rows are states, columns outcomes. ``counts`` holds raw histogram counts if known."""

    probs: np.ndarray
    counts: Optional[np.ndarray] = None
    labels: tuple[str, ...] = ()
    fingerprint: Optional[str] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.probs = np.atleast_2d(np.asarray(self.probs, dtype=float))
        if self.counts is not None:
            counts = np.atleast_2d(np.asarray(self.counts))
            if counts.shape != self.probs.shape:
                raise ValueError("counts and probs differ in shape")
            if np.any(counts < 0) or not np.all(np.equal(np.mod(counts, 1), 0)):
                raise ValueError("counts must be nonnegative integers")
            self.counts = counts.astype(np.int64)
        if np.any(self.probs < 0):
            raise ValueError("probabilities must be nonnegative")
        if np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("each row must sum to 1")
        if not self.labels:
            self.labels = tuple(f"state{i}" for i in range(self.probs.shape[0]))
        if len(self.labels) != self.probs.shape[0]:
            raise ValueError("one label per state required")

    @classmethod
    def from_counts(cls, counts, labels=(), fingerprint=None, meta=None) -> "OutcomeDistribution":
        counts = np.atleast_2d(np.asarray(counts, dtype=np.int64))
        totals = counts.sum(axis=1, keepdims=True)
        if np.any(totals == 0):
            raise ValueError("every state needs at least one sample")
        return cls(counts / totals, counts, tuple(labels), fingerprint, dict(meta or {}))

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def outcomes(self) -> int:
        return self.probs.shape[1]

    @property
    def totals(self) -> Optional[np.ndarray]:
        return None if self.counts is None else self.counts.sum(axis=1)

    def with_fingerprint(self, fingerprint: Optional[str]) -> "OutcomeDistribution":
        return OutcomeDistribution(self.probs, self.counts, self.labels, fingerprint, dict(self.meta))


def model_distribution(ensemble: ProbeEnsemble, noise: NoiseModel, bins: BinningScheme) -> OutcomeDistribution:
    """Expected outcome distribution of every probe state, ADC imbalance applied last."""
    rows = np.array([outcome_probabilities(a, noise, bins) for a in ensemble.effective_amplitudes])
    if noise.gamma:
        rows = gamma_map(rows, noise.gamma)
    rows /= rows.sum(axis=1, keepdims=True)
    labels = tuple(f"alpha={a:.6g}" for a in ensemble.amplitudes)
    return OutcomeDistribution(rows, labels=labels)
