"""Parameter searches: (R, alpha_bar) maximization and the cutoff feasibility frontier."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize

from .certify import certify_coherent, strategy_feasible
from .quadrature import NoiseModel, ProbeEnsemble, fixed_width_bins, model_distribution
from .solver import SolverOptions

RANGE_BOUNDS = (0.05, 5.0)
ALPHA_BOUNDS = (0.02, 3.0)


@dataclass(frozen=True)
class ModelSettings:
    """Model-sourced coherent-mode instance; ``alpha_bar`` is the largest probe amplitude."""

    bit_depth: int
    n_states: int
    snr_db: float
    range_r: float
    alpha_bar: float
    efficiency: float = 1.0
    gamma: float = 0.0
    cutoff: int = 6

    def ensemble(self) -> ProbeEnsemble:
        return ProbeEnsemble.equally_spaced(self.n_states, self.alpha_bar, self.efficiency)

    def noise(self) -> NoiseModel:
        return NoiseModel.from_snr_db(self.snr_db, self.gamma)

    def bins(self):
        return fixed_width_bins(self.bit_depth, self.range_r)

    def replace(self, **kw) -> "ModelSettings":
        vals = {**self.__dict__, **kw}
        return ModelSettings(**vals)


def model_entropy(settings: ModelSettings, opts: Optional[SolverOptions] = None) -> float:
    """Certified min-entropy of the noiseless-statistics model; -inf when nothing is certified."""
    ens, bins = settings.ensemble(), settings.bins()
    data = model_distribution(ens, settings.noise(), bins)
    res = certify_coherent(ens, data, bins, settings.cutoff, settings.gamma, opts=opts)
    if res.p_g is None:
        return -math.inf
    return res.h_min


@dataclass
class OptimizationResult:
    settings: ModelSettings
    h_min: float
    evaluations: int
    history: list = field(default_factory=list)


def optimize_settings(
    base: ModelSettings,
    evaluate: Optional[Callable[[ModelSettings], float]] = None,
    range_bounds: tuple[float, float] = RANGE_BOUNDS,
    alpha_bounds: tuple[float, float] = ALPHA_BOUNDS,
    rounds: int = 3,
    xtol: float = 1e-3,
    seeds: Sequence[tuple[float, float]] = (),
) -> OptimizationResult:
    """Coordinate-wise maximization of the entropy over ``(R, alpha_bar)``.

    Each coordinate is searched with bounded Brent (golden-section steps with
    parabolic acceleration). Seeds are evaluated first and the best point seen
    anywhere is returned, so a seed carried over from a dominated configuration
    gives a lower bound on the result.
    """
    evaluate = evaluate or model_entropy
    cache: dict[tuple[float, float], float] = {}
    history = []

    def value(r, a):
        key = (round(float(r), 12), round(float(a), 12))
        if key not in cache:
            h = evaluate(base.replace(range_r=key[0], alpha_bar=key[1]))
            cache[key] = h
            history.append((key[0], key[1], h))
        return cache[key]

    def clip(v, lo_hi):
        return min(max(v, lo_hi[0]), lo_hi[1])

    best = (base.range_r, base.alpha_bar)
    value(*best)
    for r, a in seeds:
        value(clip(r, range_bounds), clip(a, alpha_bounds))
    best = max(cache, key=cache.get)

    for _ in range(rounds):
        start = cache[best]
        r, a = best
        optimize.minimize_scalar(
            lambda x: -_finite(value(x, a)), bounds=range_bounds, method="bounded", options={"xatol": xtol}
        )
        best = max(cache, key=cache.get)
        r, a = best
        optimize.minimize_scalar(
            lambda x: -_finite(value(r, x)), bounds=alpha_bounds, method="bounded", options={"xatol": xtol}
        )
        best = max(cache, key=cache.get)
        if cache[best] - start <= xtol * 1e-3:
            break
    return OptimizationResult(base.replace(range_r=best[0], alpha_bar=best[1]), cache[best], len(cache), history)


def _finite(h: float) -> float:
    # infeasible or failed points act as a floor below any certified entropy
    return h if math.isfinite(h) else -1.0


def refining_range(range_r: float, coarse_depth: int, fine_depth: int) -> float:
    """Range at which fixed-width bins of ``fine_depth`` contain every edge of ``coarse_depth`` at ``range_r``.

    With equal bin widths the finer grid extends the coarser one symmetrically,
    so its outcomes refine the coarser outcomes.
    """
    if fine_depth < coarse_depth:
        raise ValueError("fine_depth must be >= coarse_depth")
    dc, df = 2**coarse_depth, 2**fine_depth
    if dc == 2:
        return range_r
    return range_r * (df - 2) / (dc - 2)


def nesting_alpha_bar(alpha_bar: float, n_from: int, n_to: int) -> float:
    """Largest amplitude of an ``n_to``-state equally spaced ensemble that contains the ``n_from``-state one.

    Keeping the spacing fixed makes the smaller ensemble a subset, so the larger
    one faces more constraints and certifies at least as much.
    """
    if n_to < n_from or n_from < 2:
        raise ValueError("need 2 <= n_from <= n_to")
    return alpha_bar * (n_to - 1) / (n_from - 1)


@dataclass
class FrontierPoint:
    cutoff: int
    alpha_max: float
    bracket: tuple[float, float]
    farkas_residual: Optional[float]  # checked ray at the infeasible end of the bracket
    unresolved: list = field(default_factory=list)


def _verdict(alpha, bins, noise, cutoff, opts):
    ens = ProbeEnsemble((0.0, alpha))
    return strategy_feasible(ens, model_distribution(ens, noise, bins), cutoff, opts)


def feasibility_frontier(
    cutoff: int,
    bins,
    noise: NoiseModel,
    step: float = 0.25,
    alpha_cap: float = 8.0,
    tol: float = 1e-2,
    opts: Optional[SolverOptions] = None,
) -> FrontierPoint:
    """Largest probe amplitude before the first certified-infeasible point.

    A grid walk from ``step`` finds the first transition to infeasibility
    (feasibility is not monotone in the amplitude: very large amplitudes can
    become reproducible again), then bisection narrows the bracket to ``tol``.
    Points the solver cannot classify are recorded and treated as feasible,
    which can only move the reported amplitude up.
    """
    unresolved = []
    lo, hi, ray_residual = 0.0, None, None
    for a in np.arange(step, alpha_cap + 0.5 * step, step):
        v = _verdict(float(a), bins, noise, cutoff, opts)
        if v.infeasible:
            hi, ray_residual = float(a), v.farkas_residual
            break
        if not v.feasible:
            unresolved.append(float(a))
        lo = float(a)
    if hi is None:
        return FrontierPoint(cutoff, math.inf, (lo, math.inf), None, unresolved)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        v = _verdict(mid, bins, noise, cutoff, opts)
        if v.infeasible:
            hi, ray_residual = mid, v.farkas_residual
        else:
            if not v.feasible:
                unresolved.append(mid)
            lo = mid
    return FrontierPoint(cutoff, lo, (lo, hi), ray_residual, unresolved)
