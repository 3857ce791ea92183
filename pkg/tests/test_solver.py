import cvxpy as cp
import numpy as np
import pytest

from qrngcert.problems import build_primal
from qrngcert.quadrature import NoiseModel, ProbeEnsemble, fixed_width_bins, model_distribution
from qrngcert.solver import (
    DUAL_INFEASIBLE,
    ITERATION_LIMIT,
    OPTIMAL,
    PRIMAL_INFEASIBLE,
    BlockGroup,
    ConicProgram,
    SolverOptions,
    check_feasibility,
    farkas_violation,
    solve,
)


def single_block(constraints, cost, b):
    """One PSD block with every listed constraint matrix attached."""
    dim = cost.shape[0]
    m = len(constraints)
    group = BlockGroup(dim, np.arange(m)[None], np.array(constraints)[None], cost[None])
    return ConicProgram((group,), np.asarray(b, dtype=float))


E11 = np.array([[1.0, 0.0], [0.0, 0.0]])


def test_trace_minimization():
    res = solve(single_block([E11], np.eye(2), [1.0]))
    assert res.status == OPTIMAL
    assert res.objective == pytest.approx(1.0, abs=1e-8)
    np.testing.assert_allclose(res.x[0][0], E11, atol=1e-6)


def test_two_by_two_lmi():
    # dual side: maximise -y subject to [[y, 1], [1, y]] psd, optimum y = 1
    res = solve(single_block([-np.eye(2)], np.array([[0.0, 1.0], [1.0, 0.0]]), [-1.0]))
    assert res.status == OPTIMAL
    assert res.y[0] == pytest.approx(1.0, abs=1e-7)
    assert res.dual_objective == pytest.approx(-1.0, abs=1e-8)


def test_primal_infeasible_has_farkas_ray():
    prog = single_block([E11], np.eye(2), [-1.0])
    res = solve(prog)
    assert res.status == PRIMAL_INFEASIBLE
    assert farkas_violation(prog, res.certificate["y"]) <= 1e-6
    feas = check_feasibility(prog)
    assert feas.infeasible and feas.farkas_residual <= 1e-6


def test_unbounded_primal_is_dual_infeasible():
    prog = single_block([E11], np.array([[0.0, -1.0], [-1.0, 0.0]]), [1.0])
    assert solve(prog).status == DUAL_INFEASIBLE


def test_iteration_cap():
    prog = single_block([E11], np.eye(2), [1.0])
    assert solve(prog, SolverOptions(max_iter=2)).status == ITERATION_LIMIT


def random_instance(rng, dims, m):
    """Strictly feasible primal and dual: b from a PD point, PD cost."""
    groups, xs = [], []
    row = 0
    per = [m] * len(dims)
    for dim, r in zip(dims, per):
        a = rng.standard_normal((1, r, dim, dim))
        a = a + np.swapaxes(a, -1, -2)
        g = rng.standard_normal((dim, dim))
        c = g @ g.T + dim * np.eye(dim)
        groups.append(BlockGroup(dim, np.arange(r)[None] + 0 * row, a, c[None]))
        h = rng.standard_normal((dim, dim))
        xs.append((h @ h.T + np.eye(dim))[None])
    prog = ConicProgram(tuple(groups), np.zeros(m))
    return prog.with_rhs(prog.apply(xs))


def cvxpy_value(prog):
    xs = [cp.Variable((g.dim, g.dim), PSD=True) for g in prog.groups]
    expr = [0] * prog.n_constraints
    for g, x in zip(prog.groups, xs):
        for j, i in enumerate(g.rows[0]):
            expr[i] = expr[i] + cp.trace(g.coefs[0, j] @ x)
    obj = sum(cp.trace(g.cost[0] @ x) for g, x in zip(prog.groups, xs))
    problem = cp.Problem(cp.Minimize(obj), [e == bi for e, bi in zip(expr, prog.b)])
    problem.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    return problem.value


@pytest.mark.parametrize("seed", range(6))
def test_matches_cvxpy_on_random_programs(seed):
    rng = np.random.default_rng(seed)
    prog = random_instance(rng, dims=(3, 2, 4)[: 1 + seed % 3], m=4)
    res = solve(prog)
    assert res.status == OPTIMAL
    ref = cvxpy_value(prog)
    assert res.objective == pytest.approx(ref, rel=1e-6, abs=1e-7)
    # optimal points satisfy the equalities and stay in the cone
    assert np.abs(prog.apply(res.x) - prog.b).max() <= 1e-7
    assert min(np.linalg.eigvalsh(x).min() for x in res.x) >= -1e-8
    assert res.dual_objective == pytest.approx(res.primal_objective, abs=1e-6)


def test_bitwise_determinism():
    prog = random_instance(np.random.default_rng(11), (3, 4), 5)
    a, b = solve(prog), solve(prog)
    assert a.iterations == b.iterations
    assert np.array_equal(a.y, b.y)
    assert all(np.array_equal(p, q) for p, q in zip(a.x, b.x))


def coherent_feasibility(alpha, cutoff):
    bins = fixed_width_bins(4, 5.0)
    ens = ProbeEnsemble((0.0, alpha))
    data = model_distribution(ens, NoiseModel.from_snr_db(10.0), bins)
    return check_feasibility(build_primal(ens, data, cutoff))


def test_large_amplitude_is_certified_infeasible():
    feas = coherent_feasibility(3.0, 2)
    assert feas.infeasible
    assert feas.farkas_residual <= 1e-6


@pytest.mark.parametrize("cutoff", [0, 1, 3, 6])
def test_vacuum_only_is_feasible(cutoff):
    bins = fixed_width_bins(2, 1.0)
    ens = ProbeEnsemble((0.0,))
    data = model_distribution(ens, NoiseModel.from_snr_db(10.0), bins)
    assert check_feasibility(build_primal(ens, data, cutoff)).feasible
