"""Guessing-probability SDPs in block form.

Eve's strategy is a family of operators ``M[lam, k]`` (``lam`` = her guess, ``k`` = the
recorded outcome), each a PSD matrix on the truncated Fock space. For every
guess the outcome operators add up to a multiple of the identity, and the
strategy has to reproduce the observed statistics. Two measurement models are
supported:

* coherent mode: only the probe states are trusted, data enter as
  ``sum_lam Tr[rho_i M[lam, k]] = p(k | rho_i)``;
* tomography mode: the detector POVM is trusted, ``sum_lam M[lam, k] = Sigma_k``.

Each mode is built twice. The ``*_primal`` builders produce the strategy
program in equality form, the ``*_dual`` builders produce the certificate
program in LMI form over the dual variables. Both are stored as
:class:`~qrngcert.solver.ConicProgram` instances, but with different constraint
bases, so agreement between the two is a real consistency check.

Redundant constraints are removed before solving (an interior-point method needs
a full row rank constraint map): the identity condition is written with
``D(D+1)/2 - 1`` rows per guess, the last outcome row of every non-reference
state is implied by normalisation, and in tomography mode only the trace of the
last POVM element is imposed.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .fock import FockOperator, coherent_state
from .quadrature import BinningScheme, NoiseModel, OutcomeDistribution, ProbeEnsemble
from .solver import ITERATION_LIMIT, NUMERICAL_FAILURE, OPTIMAL, BlockGroup, ConicProgram, SolveResult

COHERENT = "coherent"
TOMOGRAPHY = "tomography"
LMI_TOLERANCE = 1e-7
COMPLETENESS_TOLERANCE = 1e-8
INEXACT_STATUSES = (ITERATION_LIMIT, NUMERICAL_FAILURE)


@dataclass(frozen=True)
class SdpProblem:
    program: ConicProgram
    kind: str  # coherent-primal | coherent-dual | tomo-primal | tomo-dual
    n_outcomes: int
    dim: int
    states: np.ndarray  # (n, D, D); only the reference state is used in tomography mode
    povm: Optional[np.ndarray] = None  # (d, D, D) in tomography mode
    data_index: Optional[np.ndarray] = None  # (n, d) constraint row of each data equation, -1 if dropped
    fingerprint: Optional[str] = None
    nominal_counts: dict = field(default_factory=dict)

    @property
    def form(self) -> str:
        return "lmi" if self.kind.endswith("dual") else "equality"

    @property
    def mode(self) -> str:
        return COHERENT if self.kind.startswith("coherent") else TOMOGRAPHY

    @property
    def blocks(self) -> list[tuple[int, int]]:
        return [(i, self.dim) for i in range(self.n_outcomes**2)]

    @property
    def n_scaled_identity_rows(self) -> int:
        return self.n_outcomes * _n_traceless(self.dim)

    @property
    def free_scalars(self) -> int:
        return self.program.n_constraints if self.form == "lmi" else 0

    def block_index(self, guess: int, outcome: int) -> int:
        return guess * self.n_outcomes + outcome

    def with_data(self, observed: OutcomeDistribution) -> "SdpProblem":
        """Same constraint structure, right-hand side taken from new coherent-mode data."""
        if self.mode != COHERENT:
            raise ValueError("only coherent-mode problems take outcome data")
        _check_shape(observed, self.states.shape[0], self.n_outcomes)
        b = self.program.b.copy()
        mask = self.data_index >= 0
        b[self.data_index[mask]] = np.asarray(observed.probs)[mask]
        return SdpProblem(
            self.program.with_rhs(b), self.kind, self.n_outcomes, self.dim, self.states, self.povm,
            self.data_index, self.fingerprint, self.nominal_counts,
        )

    def feasibility_version(self) -> "SdpProblem":
        """Zero-objective copy used for feasibility checks."""
        if self.form == "equality":
            prog = self.program.with_cost([np.zeros_like(g.cost) for g in self.program.groups])
        else:
            prog = self.program.with_rhs(np.zeros_like(self.program.b))
        return SdpProblem(
            prog, self.kind, self.n_outcomes, self.dim, self.states, self.povm,
            self.data_index, self.fingerprint, self.nominal_counts,
        )


@dataclass(frozen=True)
class DualCertificate:
    """Dual-feasible point: any such point upper-bounds the guessing probability."""

    nu: Optional[np.ndarray]  # (d, n), nu[k, i]; None in tomography mode
    h_blocks: np.ndarray  # (d, D, D)
    rho0: np.ndarray
    states: Optional[np.ndarray] = None  # (n, D, D) coherent mode
    tomo_j_blocks: Optional[np.ndarray] = None  # (d, D, D) tomography mode
    fingerprint: Optional[str] = None

    @property
    def mode(self) -> str:
        return TOMOGRAPHY if self.tomo_j_blocks is not None else COHERENT

    @property
    def dim(self) -> int:
        return self.h_blocks.shape[1]

    @property
    def n_outcomes(self) -> int:
        return self.h_blocks.shape[0]

    def lmi_blocks(self) -> np.ndarray:
        """``rho0 delta + H - Tr(H)/D + (sum_i nu rho_i | J_k)`` for every (guess, outcome)."""
        d, D = self.n_outcomes, self.dim
        eye = np.eye(D)
        h = self.h_blocks - (np.trace(self.h_blocks, axis1=1, axis2=2) / D)[:, None, None] * eye
        if self.tomo_j_blocks is not None:
            per_k = self.tomo_j_blocks
        else:
            per_k = np.einsum("ki,iab->kab", self.nu, self.states)
        out = h[:, None] + per_k[None, :]
        out[np.arange(d), np.arange(d)] += self.rho0
        return out  # (lam, k, D, D)

    def lmi_violation(self) -> float:
        """Largest eigenvalue over all LMI blocks (<= 0 means exactly feasible)."""
        blocks = self.lmi_blocks()
        return float(np.linalg.eigvalsh(blocks.reshape(-1, self.dim, self.dim))[:, -1].max())

    def is_feasible(self, tol: float = LMI_TOLERANCE) -> bool:
        return self.lmi_violation() <= tol

    def objective(self, probs=None, povm=None) -> float:
        """Raw dual objective, without the correction for LMI violation."""
        if self.mode == TOMOGRAPHY:
            povm = np.asarray(povm)
            return -float(np.einsum("kab,kab->", self.tomo_j_blocks, povm))
        return -float(np.einsum("ki,ik->", self.nu, np.asarray(probs)))

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode,
            "fingerprint": self.fingerprint,
            "h_blocks": self.h_blocks.tolist(),
            "rho0": self.rho0.tolist(),
        }
        if self.nu is not None:
            out["nu"] = self.nu.tolist()
            out["states"] = self.states.tolist()
        if self.tomo_j_blocks is not None:
            out["tomo_j_blocks"] = self.tomo_j_blocks.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "DualCertificate":
        def arr(key):
            return None if data.get(key) is None else np.asarray(data[key], dtype=float)

        return cls(
            nu=arr("nu"), h_blocks=arr("h_blocks"), rho0=arr("rho0"), states=arr("states"),
            tomo_j_blocks=arr("tomo_j_blocks"), fingerprint=data.get("fingerprint"),
        )


def settings_fingerprint(
    ensemble: ProbeEnsemble,
    bins: Union[BinningScheme, int],
    cutoff: int,
    mode: str,
    gamma: float = 0.0,
    r: float = 1.0,
    sigma_n: Optional[float] = None,
) -> str:
    """Hash of everything a certificate's validity depends on."""
    amps = ensemble.scaled(r).amplitudes if r != 1.0 else ensemble.amplitudes
    payload = {
        "amplitudes": [float(a) for a in amps],
        "efficiency": float(ensemble.efficiency),
        "bins": bins.describe() if isinstance(bins, BinningScheme) else {"outcomes": int(bins)},
        "cutoff": int(cutoff),
        "mode": mode,
        "gamma": float(gamma),
    }
    if sigma_n is not None:
        payload["sigma_n"] = float(sigma_n)
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(text.encode()).hexdigest()


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj))


def probe_states(ensemble: ProbeEnsemble, cutoff: int, renormalize: bool = True) -> np.ndarray:
    return np.stack([coherent_state(float(a), cutoff, renormalize) for a in ensemble.effective_amplitudes])


def _n_traceless(dim: int) -> int:
    return dim * (dim + 1) // 2 - 1


def _pairs(dim: int) -> list[tuple[int, int]]:
    return [(p, q) for p in range(dim) for q in range(p, dim)]


def _entry_selector(dim: int, p: int, q: int) -> np.ndarray:
    """Matrix ``E`` with ``<E, M> = M[p, q]`` for symmetric ``M``."""
    e = np.zeros((dim, dim))
    if p == q:
        e[p, p] = 1.0
    else:
        e[p, q] = e[q, p] = 0.5
    return e


def _primal_identity_basis(dim: int) -> np.ndarray:
    """Rows whose vanishing forces a symmetric matrix to be a multiple of the identity."""
    mats = [_entry_selector(dim, p, q) for p, q in _pairs(dim) if p < q]
    for p in range(dim - 1):
        e = np.zeros((dim, dim))
        e[p, p], e[p + 1, p + 1] = 1.0, -1.0
        mats.append(e)
    return np.array(mats).reshape(-1, dim, dim)


def _symmetric_unit(dim: int, p: int, q: int) -> np.ndarray:
    e = np.zeros((dim, dim))
    e[p, q] = e[q, p] = 1.0
    return e


def _dual_identity_basis(dim: int) -> np.ndarray:
    """Traceless projections of the symmetric units, last diagonal unit dropped as gauge."""
    eye = np.eye(dim)
    mats = []
    for p, q in _pairs(dim):
        if p == q == dim - 1:
            continue
        e = _symmetric_unit(dim, p, q)
        mats.append(e - np.trace(e) / dim * eye)
    return np.array(mats).reshape(-1, dim, dim)


def _h_from_coords(coords: np.ndarray, dim: int) -> np.ndarray:
    h = np.zeros((dim, dim))
    for c, (p, q) in zip(coords, [pq for pq in _pairs(dim) if pq != (dim - 1, dim - 1)]):
        h += c * _symmetric_unit(dim, p, q)
    return h


def _check_shape(observed: OutcomeDistribution, n_states: int, n_outcomes: int):
    probs = np.asarray(observed.probs)
    if probs.shape != (n_states, n_outcomes):
        raise ValueError(f"observed distribution has shape {probs.shape}, expected {(n_states, n_outcomes)}")


def _data_layout(n_states: int, d: int, offset: int, drop_implied: bool) -> np.ndarray:
    index = -np.ones((n_states, d), dtype=np.int64)
    row = offset
    for i in range(n_states):
        for k in range(d):
            if drop_implied and i > 0 and k == d - 1:
                continue
            index[i, k] = row
            row += 1
    return index


def _coherent_program(states, d, observed, identity_basis, drop_implied):
    n, D = states.shape[0], states.shape[1]
    q = identity_basis.shape[0]
    data_index = _data_layout(n, d, d * q, drop_implied)
    m = d * q + int((data_index >= 0).sum())
    nb = d * d
    rows = -np.ones((nb, q + n), dtype=np.int64)
    coefs = np.zeros((nb, q + n, D, D))
    cost = np.zeros((nb, D, D))
    for lam in range(d):
        for k in range(d):
            blk = lam * d + k
            rows[blk, :q] = lam * q + np.arange(q)
            coefs[blk, :q] = identity_basis
            for i in range(n):
                if data_index[i, k] >= 0:
                    rows[blk, q + i] = data_index[i, k]
                    coefs[blk, q + i] = states[i]
            if lam == k:
                cost[blk] = -states[0]
    b = np.zeros(m)
    if observed is not None:
        probs = np.asarray(observed.probs, dtype=float)
        mask = data_index >= 0
        b[data_index[mask]] = probs[mask]
    prog = ConicProgram((BlockGroup(D, rows, coefs, cost),), b)
    return prog, data_index


def _resolve_outcomes(observed_or_d) -> tuple[Optional[OutcomeDistribution], int]:
    if isinstance(observed_or_d, OutcomeDistribution):
        return observed_or_d, observed_or_d.outcomes
    return None, int(observed_or_d)


def _validate_cutoff(cutoff: int):
    if int(cutoff) != cutoff or cutoff < 0:
        raise ValueError("cutoff must be a nonnegative integer")


def build_primal(
    ensemble: ProbeEnsemble,
    observed: OutcomeDistribution,
    cutoff: int,
    renormalize: bool = True,
    fingerprint: Optional[str] = None,
) -> SdpProblem:
    """Coherent-mode strategy program (maximise the guessing probability)."""
    _validate_cutoff(cutoff)
    d = observed.outcomes
    _check_shape(observed, ensemble.n_states, d)
    states = probe_states(ensemble, cutoff, renormalize)
    D = cutoff + 1
    prog, data_index = _coherent_program(states, d, observed, _primal_identity_basis(D), renormalize)
    nominal = {"data": ensemble.n_states * d, "scaled_identity": d * D * (D + 1) // 2}
    return SdpProblem(prog, "coherent-primal", d, D, states, None, data_index, fingerprint, nominal)


def build_dual(
    ensemble: ProbeEnsemble,
    observed_or_d: Union[OutcomeDistribution, int],
    cutoff: int,
    renormalize: bool = True,
    fingerprint: Optional[str] = None,
) -> SdpProblem:
    """Coherent-mode certificate program; data only enter the objective.

    Pass an :class:`OutcomeDistribution` to set the objective now, or the number of
    outcomes and attach data later with :meth:`SdpProblem.with_data`.
    """
    _validate_cutoff(cutoff)
    observed, d = _resolve_outcomes(observed_or_d)
    if observed is not None:
        _check_shape(observed, ensemble.n_states, d)
    states = probe_states(ensemble, cutoff, renormalize)
    D = cutoff + 1
    prog, data_index = _coherent_program(states, d, observed, _dual_identity_basis(D), renormalize)
    nominal = {"nu": ensemble.n_states * d, "h_entries": d * D * (D + 1) // 2}
    return SdpProblem(prog, "coherent-dual", d, D, states, None, data_index, fingerprint, nominal)


def build_finite_dual(
    ensemble: ProbeEnsemble,
    observed: OutcomeDistribution,
    cutoff: int,
    deviations: Sequence[float],
    renormalize: bool = True,
    fingerprint: Optional[str] = None,
) -> SdpProblem:
    """Certificate program for the finite-size bound ``-sum nu p + sum_i t_i sum_k |nu[k, i]|``.

    The absolute values become free slacks ``u >= |nu|`` held by 1x1 blocks.
    Its primal is the strategy program with every data equation relaxed to
    ``|sum_lam Tr[rho_i M[lam, k]] - p(k|rho_i)| <= t_i``, so sampled data
    that no strategy reproduces exactly are still certified. Every data row is
    kept: the slack blocks pin down the per-state offsets of ``nu`` that the
    exact program leaves free.
    """
    _validate_cutoff(cutoff)
    d = observed.outcomes
    n = ensemble.n_states
    _check_shape(observed, n, d)
    t = np.broadcast_to(np.asarray(deviations, dtype=float), (n,))
    if np.any(t < 0):
        raise ValueError("deviations must be nonnegative")
    states = probe_states(ensemble, cutoff, renormalize)
    D = cutoff + 1
    base, data_index = _coherent_program(states, d, observed, _dual_identity_basis(D), False)
    m0 = base.n_constraints
    slack_row = m0 + np.arange(n * d).reshape(n, d)
    nb = 2 * n * d
    rows = np.empty((nb, 2), dtype=np.int64)
    coefs = np.zeros((nb, 2, 1, 1))
    j = 0
    for i in range(n):
        for k in range(d):
            for sign in (1.0, -1.0):
                # block value -A^T y = u - sign * nu >= 0
                rows[j] = (slack_row[i, k], data_index[i, k])
                coefs[j, 0, 0, 0] = -1.0
                coefs[j, 1, 0, 0] = sign
                j += 1
    slack = BlockGroup(1, rows, coefs, np.zeros((nb, 1, 1)))
    b = np.concatenate([base.b, -np.repeat(t, d)])
    prog = ConicProgram((base.groups[0], slack), b)
    nominal = {"nu": n * d, "h_entries": d * D * (D + 1) // 2, "abs_slacks": n * d}
    return SdpProblem(prog, "coherent-dual", d, D, states, None, data_index, fingerprint, nominal)


def _povm_array(povm: Sequence) -> np.ndarray:
    mats = np.array([p.matrix if isinstance(p, FockOperator) else np.asarray(p, dtype=float) for p in povm])
    if mats.ndim != 3 or mats.shape[1] != mats.shape[2]:
        raise ValueError("POVM elements must be square matrices of equal size")
    residual = np.abs(mats.sum(axis=0) - np.eye(mats.shape[1])).max()
    if residual > COMPLETENESS_TOLERANCE:
        raise ValueError(f"POVM is not complete on the truncated space (residual {residual:.2e})")
    return mats


def _tomo_program(povm, rho0, identity_basis, entry_basis):
    d, D = povm.shape[0], povm.shape[1]
    q = identity_basis.shape[0]
    pairs = _pairs(D)
    P = len(pairs)
    m = d * q + (d - 1) * P + 1
    nb = d * d
    rows = -np.ones((nb, q + P), dtype=np.int64)
    coefs = np.zeros((nb, q + P, D, D))
    cost = np.zeros((nb, D, D))
    b = np.zeros(m)
    for k in range(d):
        if k < d - 1:
            b[d * q + k * P: d * q + (k + 1) * P] = np.einsum("jab,ab->j", entry_basis, povm[k])
        else:
            b[m - 1] = np.trace(povm[k])
    for lam in range(d):
        for k in range(d):
            blk = lam * d + k
            rows[blk, :q] = lam * q + np.arange(q)
            coefs[blk, :q] = identity_basis
            if k < d - 1:
                rows[blk, q:] = d * q + k * P + np.arange(P)
                coefs[blk, q:] = entry_basis
            else:
                rows[blk, q] = m - 1
                coefs[blk, q] = np.eye(D)
            if lam == k:
                cost[blk] = -rho0
    return ConicProgram((BlockGroup(D, rows, coefs, cost),), b)


def build_tomo_primal(povm: Sequence, fingerprint: Optional[str] = None) -> SdpProblem:
    """Tomography-mode strategy program for a trusted POVM (vacuum reference state)."""
    mats = _povm_array(povm)
    d, D = mats.shape[0], mats.shape[1]
    rho0 = coherent_state(0.0, D - 1)
    entries = np.array([_entry_selector(D, p, q) for p, q in _pairs(D)])
    prog = _tomo_program(mats, rho0, _primal_identity_basis(D), entries)
    nominal = {"povm_entries": d * D * (D + 1) // 2, "scaled_identity": d * D * (D + 1) // 2}
    return SdpProblem(prog, "tomo-primal", d, D, rho0[None], mats, None, fingerprint, nominal)


def build_tomo_dual(povm: Sequence, fingerprint: Optional[str] = None) -> SdpProblem:
    mats = _povm_array(povm)
    d, D = mats.shape[0], mats.shape[1]
    rho0 = coherent_state(0.0, D - 1)
    units = np.array([_symmetric_unit(D, p, q) for p, q in _pairs(D)])
    prog = _tomo_program(mats, rho0, _dual_identity_basis(D), units)
    nominal = {"j_entries": d * D * (D + 1) // 2, "h_entries": d * D * (D + 1) // 2}
    return SdpProblem(prog, "tomo-dual", d, D, rho0[None], mats, None, fingerprint, nominal)


def guessing_probability(problem: SdpProblem, result: SolveResult) -> float:
    """Guessing probability read off a solve of either program."""
    if problem.form == "equality":
        return -result.primal_objective
    return -result.dual_objective


def strategy_operators(problem: SdpProblem, result: SolveResult) -> np.ndarray:
    """``M[lam, k]`` from a primal solve, shape (d, d, D, D)."""
    if problem.form != "equality":
        raise ValueError("strategy operators come from a primal problem")
    d, D = problem.n_outcomes, problem.dim
    return result.x[0].reshape(d, d, D, D)


def extract_certificate(problem: SdpProblem, result: SolveResult, allow_inexact: bool = False) -> DualCertificate:
    """Dual certificate from a solve of the LMI-form program.

    With ``allow_inexact`` the last iterate of a run that stalled before reaching
    the tolerances is used as well; its bound stays valid once the LMI violation
    is charged for (see :func:`qrngcert.certify.evaluate_certificate`).
    """
    if problem.form != "lmi":
        raise ValueError("certificates come from a dual problem")
    usable = result.status == OPTIMAL or (allow_inexact and result.status in INEXACT_STATUSES and np.all(np.isfinite(result.y)))
    if not usable:
        raise ValueError(f"cannot extract a certificate from a {result.status} solve")
    d, D = problem.n_outcomes, problem.dim
    q = _n_traceless(D)
    y = np.asarray(result.y)
    h = np.array([_h_from_coords(y[lam * q:(lam + 1) * q], D) for lam in range(d)])
    rho0 = problem.states[0]
    if problem.mode == COHERENT:
        n = problem.states.shape[0]
        nu = np.zeros((d, n))
        for i in range(n):
            for k in range(d):
                if problem.data_index[i, k] >= 0:
                    nu[k, i] = y[problem.data_index[i, k]]
        return DualCertificate(nu=nu, h_blocks=h, rho0=rho0, states=problem.states, fingerprint=problem.fingerprint)
    pairs = _pairs(D)
    P = len(pairs)
    j = np.zeros((d, D, D))
    for k in range(d - 1):
        coords = y[d * q + k * P: d * q + (k + 1) * P]
        for c, (p, qq) in zip(coords, pairs):
            j[k] += c * _symmetric_unit(D, p, qq)
    j[d - 1] = y[-1] * np.eye(D)
    return DualCertificate(nu=None, h_blocks=h, rho0=rho0, tomo_j_blocks=j, fingerprint=problem.fingerprint)
