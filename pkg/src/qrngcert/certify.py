"""Security statements from dual certificates.

The guessing-probability bound of a dual certificate is linear in the observed
distribution, which is what makes two things cheap: re-evaluating a stored
certificate on new data, and the Hoeffding finite-size correction, which only
needs the certificate's coefficients.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .fock import FockOperator
from .problems import (
    COHERENT,
    TOMOGRAPHY,
    DualCertificate,
    build_dual,
    build_finite_dual,
    build_tomo_dual,
    extract_certificate,
    settings_fingerprint,
)
from .quadrature import BinningScheme, OutcomeDistribution, ProbeEnsemble
from .solver import DUAL_INFEASIBLE, OPTIMAL, SolverOptions, check_feasibility, farkas_violation, solve

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-9
THREADS_ENV = "ENTROPY_CERT_THREADS"


class FingerprintMismatch(ValueError):
    """A certificate was applied to data produced under different assumptions."""


def min_entropy(p_g: float) -> float:
    if not 0.0 < p_g <= 1.0:
        raise ValueError(f"guessing probability {p_g} outside (0, 1]")
    return max(0.0, -math.log2(p_g))


def hoeffding_deviation(epsilon: float, n_samples) -> float:
    """Deviation ``sqrt(ln(1/eps) / (2 n))`` exceeded by an empirical frequency with probability <= eps."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    n = np.asarray(n_samples, dtype=float)
    if np.any(n <= 0):
        raise ValueError("sample counts must be positive")
    out = np.sqrt(math.log(1.0 / epsilon) / (2.0 * n))
    return float(out) if out.ndim == 0 else out


def _check_fingerprint(certificate: DualCertificate, fingerprint: Optional[str]):
    if certificate.fingerprint is None or fingerprint is None:
        raise FingerprintMismatch("certificate and data must both carry a settings fingerprint")
    if certificate.fingerprint != fingerprint:
        raise FingerprintMismatch(
            f"certificate fingerprint {certificate.fingerprint[:12]} does not match data {fingerprint[:12]}"
        )


def violation_penalty(certificate: DualCertificate) -> float:
    """Amount by which a slightly infeasible certificate's bound must be raised.

    If every LMI block is below ``v * I`` the strategy constraints give an extra
    ``v * sum_lam Tr[sum_k M[lam, k]] = v * D`` at most.
    """
    return certificate.dim * max(0.0, certificate.lmi_violation())


def evaluate_certificate(certificate: DualCertificate, distribution, fingerprint: Optional[str] = None) -> float:
    """Upper bound on the guessing probability certified for ``distribution``.

    ``distribution`` is an :class:`OutcomeDistribution` in coherent mode or the
    list of POVM elements in tomography mode (then pass ``fingerprint``).
    """
    if certificate.mode == TOMOGRAPHY:
        _check_fingerprint(certificate, fingerprint)
        povm = np.array([p.matrix if isinstance(p, FockOperator) else np.asarray(p) for p in distribution])
        value = certificate.objective(povm=povm)
    else:
        if not isinstance(distribution, OutcomeDistribution):
            raise TypeError("coherent-mode certificates are evaluated on an OutcomeDistribution")
        _check_fingerprint(certificate, distribution.fingerprint if fingerprint is None else fingerprint)
        probs = np.asarray(distribution.probs)
        if probs.shape != certificate.nu.T.shape:
            raise ValueError(f"distribution shape {probs.shape} does not match certificate {certificate.nu.T.shape}")
        value = certificate.objective(probs=probs)
    return value + violation_penalty(certificate)


def shift_gauge(certificate: DualCertificate, shifts: Sequence[float]) -> DualCertificate:
    """Equivalent certificate with ``nu[:, i] += shifts[i]`` (shifts summing to zero).

    The added ``sum_i shifts[i] rho_i`` is traceless, so it is absorbed into the
    identity multipliers and the bound on normalised data does not change.
    """
    c = np.asarray(shifts, dtype=float)
    if abs(c.sum()) > 1e-12:
        raise ValueError("gauge shifts must sum to zero")
    absorbed = np.einsum("i,iab->ab", c, certificate.states)
    return DualCertificate(
        nu=certificate.nu + c[None, :],
        h_blocks=certificate.h_blocks - absorbed[None],
        rho0=certificate.rho0,
        states=certificate.states,
        fingerprint=certificate.fingerprint,
    )


def minimize_penalty_gauge(certificate: DualCertificate, deviations: np.ndarray) -> DualCertificate:
    """Gauge with the smallest finite-size penalty ``sum_i t_i sum_k |nu[k, i]|``."""
    nu = certificate.nu
    d, n = nu.shape
    if n < 2:
        return certificate
    # variables: shifts c (n), slacks u (d*n) with u >= |nu + c|
    n_var = n + d * n
    cost = np.concatenate([np.zeros(n), np.repeat(deviations, d)])
    rows, rhs = [], []
    for i in range(n):
        for k in range(d):
            j = n + i * d + k
            for sign in (1.0, -1.0):
                row = np.zeros(n_var)
                row[i] = sign
                row[j] = -1.0
                rows.append(row)
                rhs.append(-sign * nu[k, i])
    eq = np.zeros((1, n_var))
    eq[0, :n] = 1.0
    res = linprog(
        cost, A_ub=np.array(rows), b_ub=np.array(rhs), A_eq=eq, b_eq=[0.0],
        bounds=[(None, None)] * n + [(0, None)] * (d * n), method="highs",
    )
    if not res.success:
        log.warning("gauge optimisation failed (%s); keeping the original certificate", res.message)
        return certificate
    c = res.x[:n] - res.x[:n].mean()
    shifted = shift_gauge(certificate, c)
    before = float(np.sum(deviations * np.abs(nu).sum(axis=0)))
    after = float(np.sum(deviations * np.abs(shifted.nu).sum(axis=0)))
    # the LMI is unchanged in exact arithmetic; keep the original if rounding says otherwise
    if after >= before or violation_penalty(shifted) > violation_penalty(certificate) + 1e-12:
        return certificate
    return shifted


@dataclass
class CertificationReport:
    p_g: float
    h_min: float
    p_g_finite: float
    h_min_finite: float
    epsilon: float
    r: float
    mode: str
    fingerprint: str
    samples_per_state: Optional[list]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("p_g", "p_g_finite"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0 + 1e-12:
                raise ValueError(f"{name}={v} outside (0, 1]")
        if self.p_g_finite < self.p_g - 1e-15:
            raise ValueError("finite-size bound below the asymptotic bound")

    def to_dict(self) -> dict:
        out = asdict(self)
        meta = out.pop("meta")
        out["meta"] = meta
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), default=_json_default, **kw)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj))


def finite_size_bound(
    certificate: DualCertificate,
    observed: OutcomeDistribution,
    epsilon: float = DEFAULT_EPSILON,
    r: float = 1.0,
    optimize_gauge: bool = True,
    meta: Optional[dict] = None,
    totals: Optional[Sequence[int]] = None,
) -> CertificationReport:
    """Report with the Hoeffding-corrected bound ``p_g + sum_i t(eps, N_i) sum_k |nu[k, i]|``.

    ``t`` uses each state's own sample total, taken from the counts or, for
    model distributions without counts, from ``totals``. The failure
    probability is applied per state as given, without a union bound.
    """
    if certificate.mode != COHERENT:
        raise ValueError("finite-size correction needs a coherent-mode certificate")
    if totals is None:
        if observed.counts is None:
            raise ValueError("finite-size correction needs sample counts")
        totals = observed.totals
    _check_fingerprint(certificate, observed.fingerprint)
    totals = np.asarray(totals, dtype=float)
    if totals.shape != (observed.n_states,) or np.any(totals <= 0):
        raise ValueError("need one positive sample total per state")
    dev = hoeffding_deviation(epsilon, totals)
    if optimize_gauge:
        certificate = minimize_penalty_gauge(certificate, dev)
    p_g = min(1.0, evaluate_certificate(certificate, observed))
    penalty = float(np.sum(dev * np.abs(certificate.nu).sum(axis=0)))
    p_fin = min(1.0, p_g + penalty)
    info = {
        "epsilon_scope": "per state, no union bound over states or bins",
        "finite_size_penalty": penalty,
        "lmi_violation": certificate.lmi_violation(),
        "clamped": p_g + penalty > 1.0,
    }
    info.update(meta or {})
    return CertificationReport(
        p_g=p_g,
        h_min=min_entropy(p_g),
        p_g_finite=p_fin,
        h_min_finite=min_entropy(p_fin),
        epsilon=epsilon,
        r=r,
        mode=COHERENT,
        fingerprint=certificate.fingerprint,
        samples_per_state=[int(t) for t in totals],
        meta=info,
    )


@dataclass
class CoherentResult:
    p_g: Optional[float]
    status: str
    certificate: Optional[DualCertificate] = None
    solver_status: str = ""
    iterations: int = 0
    data: Optional[OutcomeDistribution] = None

    @property
    def h_min(self) -> Optional[float]:
        return None if self.p_g is None else min_entropy(min(1.0, self.p_g))


def certify_coherent(
    ensemble: ProbeEnsemble,
    observed: OutcomeDistribution,
    bins,
    cutoff: int,
    gamma: float = 0.0,
    r: float = 1.0,
    opts: Optional[SolverOptions] = None,
    problem=None,
) -> CoherentResult:
    """Solve the certificate program for coherent-mode data and return a checked bound.

    The returned ``p_g`` is always the certificate's value plus the penalty for
    residual LMI violation, so it is a valid bound even when the solver stops
    short of its tolerances. Infeasible data are reported as ``"infeasible"``
    only with a verified Farkas ray.
    """
    assumed = ensemble.scaled(r) if r != 1.0 else ensemble
    fp = settings_fingerprint(ensemble, bins, cutoff, COHERENT, gamma, r)
    data = observed.with_fingerprint(fp)
    if problem is None:
        problem = build_dual(assumed, data, cutoff, fingerprint=fp)
    else:
        problem = problem.with_data(data)
    res = solve(problem, opts)
    if res.status == DUAL_INFEASIBLE:
        # the certificate program is unbounded: the data admit no strategy
        ray = res.certificate["y"]
        viol = farkas_violation(problem.program, ray)
        status = "infeasible" if viol <= 1e-6 else "unknown"
        return CoherentResult(None, status, None, res.status, res.iterations, data)
    try:
        cert = extract_certificate(problem, res, allow_inexact=True)
    except ValueError:
        return CoherentResult(None, "unknown", None, res.status, res.iterations, data)
    value = evaluate_certificate(cert, data)
    status = "optimal" if res.status == OPTIMAL else "bounded"
    return CoherentResult(value, status, cert, res.status, res.iterations, data)


def certify_tomography(povm: Sequence, fingerprint: Optional[str] = None, opts: Optional[SolverOptions] = None) -> CoherentResult:
    """Tomography-mode bound from the certificate program of a trusted POVM."""
    problem = build_tomo_dual(povm, fingerprint=fingerprint or "tomography")
    res = solve(problem, opts)
    try:
        cert = extract_certificate(problem, res, allow_inexact=True)
    except ValueError:
        return CoherentResult(None, "unknown", None, res.status, res.iterations)
    value = evaluate_certificate(cert, povm, fingerprint=cert.fingerprint)
    return CoherentResult(value, "optimal" if res.status == OPTIMAL else "bounded", cert, res.status, res.iterations)


@dataclass
class AuditPoint:
    r: float
    h_min: Optional[float]
    status: str  # optimal | bounded | infeasible | unknown
    p_g: Optional[float] = None


def worker_count(requested: Optional[int] = None) -> int:
    env = os.environ.get(THREADS_ENV)
    cap = int(env) if env else (os.cpu_count() or 1)
    n = requested if requested else cap
    return max(1, min(n, cap))


def amplitude_audit(
    ensemble: ProbeEnsemble,
    observed: OutcomeDistribution,
    bins,
    cutoff: int,
    r_values: Sequence[float],
    gamma: float = 0.0,
    opts: Optional[SolverOptions] = None,
    workers: Optional[int] = None,
) -> list[AuditPoint]:
    """Re-certify fixed data while the assumed amplitudes are scaled by each ``r``."""
    r_values = [float(r) for r in r_values]
    if any(not r > 0 for r in r_values):
        raise ValueError("amplitude scalings must be positive")

    def one(r):
        res = certify_coherent(ensemble, observed, bins, cutoff, gamma, r, opts)
        if res.status == "infeasible":
            return AuditPoint(r, None, "infeasible")
        if res.p_g is None:
            return AuditPoint(r, None, res.status)
        return AuditPoint(r, res.h_min, res.status, res.p_g)

    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        return list(pool.map(one, r_values))


def strategy_feasible(ensemble: ProbeEnsemble, observed: OutcomeDistribution, cutoff: int, opts=None):
    """Feasibility of reproducing ``observed`` with the assumed probe states."""
    from .problems import build_primal

    return check_feasibility(build_primal(ensemble, observed, cutoff), opts)


def certify_with_model(
    ensemble: ProbeEnsemble,
    noise,
    bins: BinningScheme,
    observed: OutcomeDistribution,
    cutoff: int,
    epsilon: float = DEFAULT_EPSILON,
    r: float = 1.0,
    opts: Optional[SolverOptions] = None,
    optimize_gauge: bool = True,
) -> tuple[CoherentResult, Optional[CertificationReport]]:
    """Certificate from a calibrated model, evaluated on sampled data.

    Sampled frequencies generally violate the equality constraints of the
    strategy program (or make it spuriously tight), while a certificate bounds
    the guessing probability for any data. The certificate is therefore
    optimized for the model distribution of ``ensemble`` under ``noise`` and
    then applied, with the finite-size penalty, to ``observed``.
    """
    from .quadrature import model_distribution

    model = model_distribution(ensemble, noise, bins)
    res = certify_coherent(ensemble, model, bins, cutoff, noise.gamma, r, opts)
    if res.certificate is None:
        return res, None
    data = observed.with_fingerprint(res.certificate.fingerprint)
    report = finite_size_bound(
        res.certificate, data, epsilon, r, optimize_gauge,
        meta={"certificate_source": "model", "model_p_g": res.p_g, "solver_status": res.solver_status},
    )
    return res, report


def certify_finite(
    ensemble: ProbeEnsemble,
    observed: OutcomeDistribution,
    bins,
    cutoff: int,
    epsilon: float = DEFAULT_EPSILON,
    gamma: float = 0.0,
    r: float = 1.0,
    opts: Optional[SolverOptions] = None,
    totals: Optional[Sequence[int]] = None,
) -> tuple[CoherentResult, Optional[CertificationReport]]:
    """Certificate chosen to minimize the finite-size bound on sampled counts.

    ``totals`` supplies per-state sample numbers for distributions without
    counts. Infeasible here means the data are inconsistent with the assumed
    states even after allowing each frequency to move by its Hoeffding
    deviation.
    """
    if totals is None:
        if observed.counts is None:
            raise ValueError("finite-size certification needs sample counts")
        totals = observed.totals
    totals = np.asarray(totals, dtype=float)
    assumed = ensemble.scaled(r) if r != 1.0 else ensemble
    fp = settings_fingerprint(ensemble, bins, cutoff, COHERENT, gamma, r)
    data = observed.with_fingerprint(fp)
    dev = hoeffding_deviation(epsilon, totals)
    problem = build_finite_dual(assumed, data, cutoff, dev, fingerprint=fp)
    res = solve(problem, opts)
    if res.status == DUAL_INFEASIBLE:
        viol = farkas_violation(problem.program, res.certificate["y"])
        status = "infeasible" if viol <= 1e-6 else "unknown"
        return CoherentResult(None, status, None, res.status, res.iterations, data), None
    try:
        cert = extract_certificate(problem, res, allow_inexact=True)
    except ValueError:
        return CoherentResult(None, "unknown", None, res.status, res.iterations, data), None
    report = finite_size_bound(
        cert, data, epsilon, r, optimize_gauge=True, totals=totals,
        meta={"certificate_source": "finite-size program", "solver_status": res.status},
    )
    status = "optimal" if res.status == OPTIMAL else "bounded"
    return CoherentResult(report.p_g, status, cert, res.status, res.iterations, data), report
