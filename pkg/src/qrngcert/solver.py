"""Dense primal-dual interior-point solver for block-diagonal SDPs.

Solves the pair

    (P)  minimize  <C, X>   s.t.  <A_i, X> = b_i,  X psd (block diagonal)
    (D)  maximize  b'y      s.t.  C - sum_i y_i A_i = S psd

through the homogeneous self-dual embedding, so infeasible or unbounded
problems end with a Farkas certificate instead of diverging. Search
directions use Nesterov-Todd scaling with a Mehrotra predictor-corrector and
a dense Cholesky factorisation of the Schur complement.

Blocks of equal size are stored stacked. Each block lists the constraint rows
it touches (``rows``, padded with -1) together with the matching coefficient
matrices, which keeps the Schur complement assembly proportional to the
nonzero structure while the linear algebra itself stays dense.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.linalg

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
PRIMAL_INFEASIBLE = "primal-infeasible"
DUAL_INFEASIBLE = "dual-infeasible"
NUMERICAL_FAILURE = "numerical-failure"
ITERATION_LIMIT = "iteration-limit"


@dataclass(frozen=True)
class BlockGroup:
    """``count`` PSD blocks of size ``dim`` and the constraint rows touching them."""

    dim: int
    rows: np.ndarray  # (count, r) constraint index, -1 = padding
    coefs: np.ndarray  # (count, r, dim, dim) symmetric
    cost: np.ndarray  # (count, dim, dim) symmetric

    @property
    def count(self) -> int:
        return self.cost.shape[0]


@dataclass(frozen=True)
class ConicProgram:
    groups: tuple[BlockGroup, ...]
    b: np.ndarray

    @property
    def n_constraints(self) -> int:
        return len(self.b)

    @property
    def barrier_degree(self) -> int:
        return sum(g.dim * g.count for g in self.groups)

    def apply(self, xs) -> np.ndarray:
        """``A(X)``: constraint values of block matrices ``xs`` (one stack per group)."""
        m = self.n_constraints
        out = np.zeros(m + 1)
        for g, x in zip(self.groups, xs):
            nb, r = g.rows.shape
            vals = (g.coefs.reshape(nb, r, -1) @ x.reshape(nb, -1, 1))[..., 0]
            out += np.bincount(g.rows.ravel() + 1, vals.ravel(), minlength=m + 1)
        return out[1:]

    def adjoint(self, y) -> list[np.ndarray]:
        """``A^T y`` as block stacks."""
        y_ext = np.concatenate(([0.0], np.asarray(y, dtype=float)))
        out = []
        for g in self.groups:
            nb, r = g.rows.shape
            yy = y_ext[g.rows + 1]
            out.append((yy[:, None, :] @ g.coefs.reshape(nb, r, -1)).reshape(nb, g.dim, g.dim))
        return out

    def with_cost(self, costs) -> "ConicProgram":
        groups = tuple(BlockGroup(g.dim, g.rows, g.coefs, c) for g, c in zip(self.groups, costs))
        return ConicProgram(groups, self.b)

    def with_rhs(self, b) -> "ConicProgram":
        return ConicProgram(self.groups, np.asarray(b, dtype=float))


@dataclass
class SolverOptions:
    feas_tol: float = 1e-9
    gap_tol: float = 1e-9
    # a stalled run still counts as solved if its best iterate has feasibility
    # residuals below acceptable_tol and a relative gap below acceptable_gap
    acceptable_tol: float = 1e-7
    acceptable_gap: float = 1e-7
    stall_iterations: int = 8
    infeas_tol: float = 1e-8
    max_iter: int = 200
    step_fraction: float = 0.99
    regularization: float = 1e-10
    refinement_steps: int = 3
    # a stalled run is repeated once with this (smaller) regularization; None disables
    fallback_regularization: Optional[float] = 1e-13
    fallback_refinement_steps: int = 8
    chunk_entries: int = 4_000_000
    log: Optional[Callable[[str], None]] = None


@dataclass
class SolveResult:
    status: str
    objective: float
    primal_objective: float
    dual_objective: float
    x: list = field(default_factory=list)
    y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    s: list = field(default_factory=list)
    iterations: int = 0
    residuals: dict = field(default_factory=dict)
    certificate: Optional[dict] = None

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def _sym(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _inner(xs, ss) -> float:
    return float(sum(np.vdot(x, s) for x, s in zip(xs, ss)))


def _norm(xs) -> float:
    return float(np.sqrt(sum(np.vdot(x, x) for x in xs)))


class _Scaling:
    """Nesterov-Todd scaling ``R`` with ``R^T S R = R^-1 X R^-T = diag(lam)`` per block."""

    def __init__(self, x, s):
        lx = np.linalg.cholesky(x)
        ls = np.linalg.cholesky(s)
        u, lam, vt = np.linalg.svd(np.swapaxes(ls, -1, -2) @ lx)
        self.lam = lam
        self.r = lx @ np.swapaxes(vt, -1, -2) / np.sqrt(lam)[:, None, :]
        self.rt = np.swapaxes(self.r, -1, -2)

    def to_dual(self, v):
        """``R^T V R``."""
        return self.rt @ v @ self.r

    def from_scaled(self, v):
        """``R V R^T``."""
        return self.r @ v @ self.rt

    def w(self, v):
        """``W V W`` with ``W = R R^T``."""
        return self.from_scaled(self.to_dual(v))

    def solve_jordan(self, t):
        """Solve ``lam o Z = T`` (Jordan product with diag(lam))."""
        lam = self.lam
        return 2.0 * t / (lam[:, :, None] + lam[:, None, :])

    def max_step(self, dv) -> float:
        """Largest step keeping ``diag(lam) + a * dv`` psd."""
        rs = 1.0 / np.sqrt(self.lam)
        ev = np.linalg.eigvalsh(dv * rs[:, :, None] * rs[:, None, :])
        lo = ev[:, 0].min() if ev.size else 0.0
        return np.inf if lo >= 0 else -1.0 / lo


class _Kkt:
    """Schur complement ``M = A W A^T`` factorisation for one interior-point iterate."""

    def __init__(self, prog, scalings, row_scale, opts, operator=None):
        self.operator = operator
        m = prog.n_constraints
        size = (m + 1) * (m + 1)
        flat = np.zeros(size)
        for g, sc in zip(prog.groups, scalings):
            nb, r = g.rows.shape
            step = max(1, opts.chunk_entries // max(1, r * g.dim * g.dim))
            for lo in range(0, nb, step):
                hi = min(nb, lo + step)
                rt = sc.rt[lo:hi, None]
                scaled = (rt @ g.coefs[lo:hi] @ sc.r[lo:hi, None]).reshape(hi - lo, r, -1)
                gram = scaled @ np.swapaxes(scaled, -1, -2)
                idx = g.rows[lo:hi] + 1
                flat_idx = idx[:, :, None] * (m + 1) + idx[:, None, :]
                flat += np.bincount(flat_idx.ravel(), gram.ravel(), minlength=size)
        mat = flat.reshape(m + 1, m + 1)[1:, 1:]
        mat = mat / row_scale[:, None] / row_scale[None, :]
        self.mat = mat
        diag = np.diag(mat)
        floor = 1e-14 * max(1.0, float(diag.max(initial=0.0)))
        self.factor = None
        for boost in (1.0, 1e2, 1e4, 1e6):
            shift = opts.regularization * boost * np.maximum(diag, floor)
            try:
                self.factor = scipy.linalg.cho_factor(mat + np.diag(shift), lower=True, check_finite=False)
                break
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
                continue
        if self.factor is None:
            raise np.linalg.LinAlgError("Schur complement lost positive definiteness")
        self.refinement_steps = opts.refinement_steps

    def solve(self, rhs, guess=None):
        sol = scipy.linalg.cho_solve(self.factor, rhs, check_finite=False) if guess is None else guess
        apply = self.operator or (lambda v: self.mat @ v)
        res = rhs - apply(sol)
        err = np.linalg.norm(res)
        for _ in range(self.refinement_steps):
            cand = sol + scipy.linalg.cho_solve(self.factor, res, check_finite=False)
            cand_res = rhs - apply(cand)
            cand_err = np.linalg.norm(cand_res)
            if not cand_err < err:
                break
            sol, res, prev, err = cand, cand_res, err, cand_err
            if err > 0.5 * prev:
                break
        return sol


def solve_conic(prog: ConicProgram, opts: Optional[SolverOptions] = None) -> SolveResult:
    """Run the homogeneous self-dual interior-point method on a :class:`ConicProgram`.

    The static regularization biases Newton steps by a relative 1e-10, which
    matters when data operators have eigenvalues of that order (noiseless POVM
    elements at moderate cutoffs). Runs that stall are therefore repeated once
    with a smaller shift and more refinement, keeping the better outcome.
    """
    opts = opts or SolverOptions()
    res = _solve_once(prog, opts)
    fb = opts.fallback_regularization
    if res.status in (NUMERICAL_FAILURE, ITERATION_LIMIT) and fb is not None and fb < opts.regularization:
        retry = _solve_once(prog, replace(
            opts, regularization=fb, refinement_steps=opts.fallback_refinement_steps, fallback_regularization=None
        ))
        if retry.status != NUMERICAL_FAILURE and (retry.status == OPTIMAL or _worst(retry) < _worst(res)):
            return retry
    return res


def _worst(res: SolveResult) -> float:
    r = res.residuals
    return max(float(r.get("primal", np.inf)), float(r.get("dual", np.inf)))


def _solve_once(prog: ConicProgram, opts: SolverOptions) -> SolveResult:
    emit = opts.log
    m = prog.n_constraints
    groups = prog.groups

    # row equilibration: every constraint gets unit Frobenius norm
    sq = np.zeros(m + 1)
    for g in groups:
        nrm = np.einsum("brij,brij->br", g.coefs, g.coefs)
        sq += np.bincount(g.rows.ravel() + 1, nrm.ravel(), minlength=m + 1)
    row_scale = np.sqrt(sq[1:])
    row_scale[row_scale == 0] = 1.0
    b_raw = prog.b / row_scale
    c_raw = [g.cost for g in groups]
    b_norm = max(1.0, float(np.linalg.norm(b_raw)))
    c_norm = max(1.0, _norm(c_raw))
    b = b_raw / b_norm
    c = [ci / c_norm for ci in c_raw]

    def A(xs):
        return prog.apply(xs) / row_scale

    def AT(y):
        return prog.adjoint(y / row_scale)

    nu = prog.barrier_degree
    xs = [np.broadcast_to(np.eye(g.dim), (g.count, g.dim, g.dim)).copy() for g in groups]
    ss = [x.copy() for x in xs]
    y = np.zeros(m)
    tau, kappa = 1.0, 1.0
    status = ITERATION_LIMIT
    resid = {}
    it = 0
    small_steps = 0
    best = None
    best_merit = np.inf
    stalled = 0

    for it in range(opts.max_iter + 1):
        ax = A(xs)
        aty = AT(y)
        rp = b * tau - ax
        rd = [ci * tau - a - s for ci, a, s in zip(c, aty, ss)]
        cx = _inner(c, xs)
        by = float(b @ y)
        rg = kappa + cx - by
        mu = (_inner(xs, ss) + tau * kappa) / (nu + 1)

        pres = np.linalg.norm(rp) / tau / (1 + np.linalg.norm(b))
        dres = _norm(rd) / tau / (1 + _norm(c))
        pobj, dobj = cx / tau, by / tau
        gap = abs(pobj - dobj) / (1 + abs(pobj) + abs(dobj))
        resid = {"primal": pres, "dual": dres, "gap": gap, "tau": tau, "kappa": kappa, "mu": mu}
        if emit:
            emit(f"{it:3d} pres={pres:.2e} dres={dres:.2e} gap={gap:.2e} pobj={pobj:+.9e} dobj={dobj:+.9e} tau={tau:.2e} kappa={kappa:.2e}")

        if pres <= opts.feas_tol and dres <= opts.feas_tol and gap <= opts.gap_tol:
            status = OPTIMAL
            break
        merit = max(pres, dres, gap * opts.acceptable_tol / opts.acceptable_gap)
        if merit < 0.9 * best_merit:
            best_merit = merit
            best = ([x.copy() for x in xs], y.copy(), [s.copy() for s in ss], tau, dict(resid))
            stalled = 0
        else:
            stalled += 1
            # rounding noise dominates once a good iterate stops improving
            if best_merit <= opts.acceptable_tol and stalled >= opts.stall_iterations:
                break
        if by > 0:
            ray_res = _norm([a + s for a, s in zip(aty, ss)]) / by
            if ray_res <= opts.infeas_tol:
                status = PRIMAL_INFEASIBLE
                break
        if cx < 0:
            ray_res = np.linalg.norm(ax) / -cx
            if ray_res <= opts.infeas_tol:
                status = DUAL_INFEASIBLE
                break
        if it == opts.max_iter:
            break

        try:
            scal = [_Scaling(x, s) for x, s in zip(xs, ss)]
            kkt = _Kkt(prog, scal, row_scale, opts,
                       operator=lambda u: A([sc.w(a) for sc, a in zip(scal, AT(u))]))
        except np.linalg.LinAlgError as exc:
            log.debug("factorisation failed: %s", exc)
            status = NUMERICAL_FAILURE
            break

        wc = [sc.w(ci) for sc, ci in zip(scal, c)]
        v = kkt.solve(A(wc) + b)
        dx1 = [sc.w(a) - w for sc, a, w in zip(scal, AT(v), wc)]
        denom_base = -_inner(c, dx1) + float(b @ v)

        def newton(r1, r2, r3, tmat, r5):
            z = [sc.solve_jordan(t) for sc, t in zip(scal, tmat)]
            r4 = [sc.from_scaled(zz) for sc, zz in zip(scal, z)]
            gg = [q - sc.w(r) for q, sc, r in zip(r4, scal, r2)]
            u = kkt.solve(r1 - A(gg))
            dx0 = [q + sc.w(a) for q, sc, a in zip(gg, scal, AT(u))]
            dtau = (r3 + _inner(c, dx0) - float(b @ u) + r5 / tau) / (denom_base + kappa / tau)
            dy = u + v * dtau
            dx = [p + q * dtau for p, q in zip(dx0, dx1)]
            ds = [r - a + ci * dtau for r, a, ci in zip(r2, AT(dy), c)]
            dkappa = (r5 - kappa * dtau) / tau
            dxs = [zz - sc.to_dual(d) for zz, sc, d in zip(z, scal, ds)]
            dss = [sc.to_dual(d) for sc, d in zip(scal, ds)]
            return dx, dy, ds, dtau, dkappa, dxs, dss

        def step_length(dxs, dss, dtau, dkappa):
            a = np.inf
            for sc, p, q in zip(scal, dxs, dss):
                a = min(a, sc.max_step(p), sc.max_step(q))
            if dtau < 0:
                a = min(a, -tau / dtau)
            if dkappa < 0:
                a = min(a, -kappa / dkappa)
            return a

        lam2 = [np.einsum("bi,ij->bij", sc.lam**2, np.eye(sc.lam.shape[1])) for sc in scal]
        aff = newton(rp, rd, rg, [-l2 for l2 in lam2], -tau * kappa)
        a_aff = min(1.0, step_length(*aff[5:], aff[3], aff[4]))
        sigma = (1.0 - a_aff) ** 3
        eta = 1.0 - sigma
        tmat = []
        for sc, l2, p, q in zip(scal, lam2, aff[5], aff[6]):
            corr = _sym(p @ q)
            tmat.append(sigma * mu * np.eye(sc.lam.shape[1]) - l2 - corr)
        r5 = sigma * mu - tau * kappa - aff[3] * aff[4]
        dx, dy, ds, dtau, dkappa, dxs, dss = newton(eta * rp, [eta * r for r in rd], eta * rg, tmat, r5)
        alpha = min(1.0, opts.step_fraction * step_length(dxs, dss, dtau, dkappa))

        if emit:
            emit(f"    a_aff={a_aff:.3f} sigma={sigma:.2e} alpha={alpha:.3f}")
        if alpha < 1e-12:
            small_steps += 1
            if small_steps >= 3:
                status = NUMERICAL_FAILURE
                break
        else:
            small_steps = 0
        xs = [_sym(x + alpha * d) for x, d in zip(xs, dx)]
        ss = [_sym(s + alpha * d) for s, d in zip(ss, ds)]
        y = y + alpha * dy
        tau = tau + alpha * dtau
        kappa = kappa + alpha * dkappa

    if status in (ITERATION_LIMIT, NUMERICAL_FAILURE) and best is not None and best_merit <= opts.acceptable_tol:
        xs, y, ss, tau, resid = best
        status = OPTIMAL

    # undo scaling: X scales with b_norm, (y, S) with c_norm and the row scaling
    x_out = [x * (b_norm / tau) for x in xs]
    y_out = y * (c_norm / tau) / row_scale
    s_out = [s * (c_norm / tau) for s in ss]
    pobj = _inner(c_raw, x_out)
    dobj = float(prog.b @ y_out)
    certificate = None
    if status == PRIMAL_INFEASIBLE:
        ray = y / row_scale
        ray = ray / float(prog.b @ ray)
        certificate = {"kind": "primal-infeasible", "y": ray}
    elif status == DUAL_INFEASIBLE:
        ray = [x / -_inner(c_raw, xs) for x in xs]
        certificate = {"kind": "dual-infeasible", "x": ray}
    return SolveResult(
        status=status,
        objective=pobj,
        primal_objective=pobj,
        dual_objective=dobj,
        x=x_out,
        y=y_out,
        s=s_out,
        iterations=it,
        residuals=resid,
        certificate=certificate,
    )


def farkas_violation(prog: ConicProgram, ray: np.ndarray) -> float:
    """Largest eigenvalue of ``A^T y`` for a primal infeasibility ray normalised to ``b'y = 1``.

    A nonpositive value proves that no psd ``X`` satisfies ``A(X) = b``.
    """
    ray = np.asarray(ray, dtype=float)
    scale = float(prog.b @ ray)
    if not scale > 0:
        return np.inf
    ray = ray / scale
    worst = -np.inf
    for blk in prog.adjoint(ray):
        if blk.size:
            worst = max(worst, float(np.linalg.eigvalsh(blk)[..., -1].max()))
    return worst


_SWAP = {PRIMAL_INFEASIBLE: DUAL_INFEASIBLE, DUAL_INFEASIBLE: PRIMAL_INFEASIBLE}


def solve(problem, opts: Optional[SolverOptions] = None) -> SolveResult:
    """Solve a problem built by :mod:`qrngcert.problems` (or a bare :class:`ConicProgram`).

    Statuses and ``objective`` refer to the problem as posed: for LMI-form
    problems the variables are ``y``, the objective is ``b'y`` and the
    infeasibility labels are swapped relative to the internal equality form.
    """
    program = getattr(problem, "program", problem)
    result = solve_conic(program, opts)
    if getattr(problem, "form", "equality") == "lmi":
        result.status = _SWAP.get(result.status, result.status)
        result.objective = result.dual_objective
    return result


@dataclass
class Feasibility:
    status: str  # feasible | infeasible | unknown
    solver_status: str
    ray: Optional[object] = None
    farkas_residual: Optional[float] = None

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"

    @property
    def infeasible(self) -> bool:
        return self.status == "infeasible"


FARKAS_TOLERANCE = 1e-6
FEASIBILITY_TOLERANCE = 1e-6


def _point_residual(prog: ConicProgram, xs) -> float:
    """Relative equality residual of a candidate point, or inf if it leaves the cone."""
    blocks = [_sym(x) for x in xs]
    if any(x.size and np.linalg.eigvalsh(x)[..., 0].min() < -FEASIBILITY_TOLERANCE for x in blocks):
        return np.inf
    r = prog.apply(blocks) - prog.b
    return float(np.linalg.norm(r, np.inf) / (1.0 + np.linalg.norm(prog.b, np.inf)))


def _zero_objective(problem):
    if hasattr(problem, "feasibility_version"):
        return problem.feasibility_version()
    return problem.with_cost([np.zeros_like(g.cost) for g in problem.groups])


def check_feasibility(problem, opts: Optional[SolverOptions] = None) -> Feasibility:
    """Decide feasibility with a zero-objective solve; infeasibility comes with a checked ray."""
    form = getattr(problem, "form", "equality")
    zero = _zero_objective(problem)
    program = getattr(zero, "program", zero)
    res = solve_conic(program, opts)
    if res.status == OPTIMAL:
        return Feasibility("feasible", res.status)
    if form == "equality" and res.status in (ITERATION_LIMIT, NUMERICAL_FAILURE):
        # boundary-feasible programs (no interior point) stall; accept a checked point
        if res.x is not None and _point_residual(program, res.x) <= FEASIBILITY_TOLERANCE:
            return Feasibility("feasible", res.status)
    if form == "equality" and res.status == PRIMAL_INFEASIBLE:
        ray = res.certificate["y"]
        viol = farkas_violation(program, ray)
        return Feasibility("infeasible" if viol <= FARKAS_TOLERANCE else "unknown", res.status, ray, viol)
    if form == "lmi" and res.status == DUAL_INFEASIBLE:
        ray = res.certificate["x"]
        viol = lmi_farkas_violation(program, ray)
        return Feasibility("infeasible" if viol <= FARKAS_TOLERANCE else "unknown", _SWAP[res.status], ray, viol)
    return Feasibility("unknown", res.status)


def lmi_farkas_violation(prog: ConicProgram, ray) -> float:
    """Residual of an LMI infeasibility ray ``X`` psd, ``A(X) = 0``, ``<C, X> = -1``."""
    blocks = [_sym(x) for x in ray]
    scale = -_inner([g.cost for g in prog.groups], blocks)
    if not scale > 0:
        return np.inf
    blocks = [x / scale for x in blocks]
    neg = max((float(-np.linalg.eigvalsh(x)[..., 0].min()) for x in blocks if x.size), default=0.0)
    return max(float(np.linalg.norm(prog.apply(blocks), np.inf)), neg)
