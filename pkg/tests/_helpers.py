"""Shared test utilities: data from explicit random strategies and an independent SDP formulation."""
import cvxpy as cp
import numpy as np

from qrngcert.fock import coherent_state


def states_for(amplitudes, cutoff):
    return np.array([coherent_state(a, cutoff) for a in amplitudes])


def random_povm(rng, d, dim):
    g = rng.standard_normal((d, dim, dim))
    g = g @ np.swapaxes(g, 1, 2) + 0.1 * np.eye(dim)
    s = g.sum(axis=0)
    w, v = np.linalg.eigh(s)
    inv_sqrt = v @ np.diag(w**-0.5) @ v.T
    return inv_sqrt @ g @ inv_sqrt


def strategy_distribution(rng, amplitudes, cutoff, d, n_guesses=None):
    """Outcome statistics of a random mixture of POVMs: always reproducible by some strategy."""
    dim = cutoff + 1
    lam = n_guesses or d
    weights = rng.dirichlet(np.ones(lam))
    povms = [random_povm(rng, d, dim) for _ in range(lam)]
    states = states_for(amplitudes, cutoff)
    probs = np.einsum("l,lkab,iab->ik", weights, np.array(povms), states)
    return probs / probs.sum(axis=1, keepdims=True)


def cvxpy_guessing(states, probs, deviation=None):
    """Strategy program written directly in cvxpy; ``deviation`` relaxes data to a band."""
    n, dim = states.shape[0], states.shape[1]
    d = probs.shape[1]
    m = [[cp.Variable((dim, dim), PSD=True) for _ in range(d)] for _ in range(d)]
    cons = []
    for lam in range(d):
        tot = sum(m[lam])
        cons += [tot == cp.trace(tot) / dim * np.eye(dim)]
    for i in range(n):
        for k in range(d):
            val = sum(cp.trace(states[i] @ m[lam][k]) for lam in range(d))
            if deviation is None:
                cons.append(val == probs[i, k])
            else:
                cons += [val <= probs[i, k] + deviation[i], val >= probs[i, k] - deviation[i]]
    obj = sum(cp.trace(states[0] @ m[lam][lam]) for lam in range(d))
    prob = cp.Problem(cp.Maximize(obj), cons)
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    return prob.value
