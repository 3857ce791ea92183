"""Truncated Fock-space matrices of the noisy, binned homodyne POVM.

Matrix elements are expanded in monomials of the X quadrature, so the interval
integrals reduce to ``Lambda_n = int_a^b exp(-x**2/g) x**n dx``. The Hermite
monomial coefficients alternate in sign and grow factorially, which is why the
expansion is evaluated in mpmath at a working precision chosen from the size of
the largest coefficient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import mpmath
import numpy as np

from .quadrature import VACUUM_VARIANCE, BinningScheme, NoiseModel

DEFAULT_CUTOFF = 30
MAX_CUTOFF = 60


class PrecisionLossError(ArithmeticError):
    """Cancellation in an alternating sum ate more digits than the working precision keeps."""


@dataclass(frozen=True)
class FockOperator:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("operator must be square")
        if not np.allclose(m, m.T, atol=1e-12, rtol=0):
            raise ValueError("operator must be symmetric")
        object.__setattr__(self, "matrix", 0.5 * (m + m.T))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def cutoff(self) -> int:
        return self.dim - 1

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix)[0])

    def to_list(self) -> list[list[float]]:
        return self.matrix.tolist()


def hermite(k: int, x: float) -> float:
    """Physicists' Hermite polynomial by the three-term recurrence."""
    if k < 0:
        raise ValueError("degree must be >= 0")
    h_prev, h = 1.0, 2.0 * x
    if k == 0:
        return h_prev
    for n in range(1, k):
        h_prev, h = h, 2.0 * x * h - 2.0 * n * h_prev
    return h


def _double_factorial(n: int) -> int:
    return math.prod(range(n, 0, -2)) if n > 0 else 1


def _antiderivative(n: int, x, g, mp=mpmath):
    """Closed-form antiderivative of ``exp(-x**2/g) x**n``; handles x = +-inf."""
    if mp.isinf(x):
        if n % 2:
            return mp.mpf(0)
        m = n // 2
        return mp.sign(x) * mp.mpf(_double_factorial(2 * m - 1)) / 2 ** (m + 1) * mp.sqrt(mp.pi) * mp.sqrt(g ** (2 * m + 1))
    x = mp.mpf(x)
    e = mp.exp(-x * x / g)
    if n % 2:
        m = (n - 1) // 2
        s = mp.fsum(mp.mpf(math.factorial(m) // math.factorial(m - i)) * g ** (i + 1) * x ** (2 * m - 2 * i) for i in range(m + 1))
        return -s * e / 2
    m = n // 2
    df = _double_factorial(2 * m - 1)
    s = mp.fsum(
        mp.mpf(df) / _double_factorial(2 * m - 2 * i + 1) / 2**i * g**i * x ** (2 * m - 2 * i + 1) for i in range(1, m + 1)
    )
    return -s * e + mp.mpf(df) / 2 ** (m + 1) * mp.sqrt(mp.pi) * mp.sqrt(g ** (2 * m + 1)) * mp.erf(x / mp.sqrt(g))


def lambda_integral(n: int, interval: tuple[float, float], gamma_param: float) -> float:
    """``int_a^b exp(-x**2/gamma) x**n dx`` from the odd/even closed forms."""
    a, b = interval
    if not gamma_param > 0:
        raise ValueError("gamma_param must be positive")
    if not a < b:
        return 0.0
    with mpmath.workdps(40 + 2 * n):
        g = mpmath.mpf(gamma_param)
        return float(_antiderivative(n, b, g) - _antiderivative(n, a, g))


def lambda_integrals(n_max: int, interval: tuple[float, float], gamma_param, mp=None):
    """All ``Lambda_0 .. Lambda_{n_max}`` by the integration-by-parts recursion

    ``Lambda_n = (g/2)(n-1) Lambda_{n-2} - (g/2) [x**(n-1) exp(-x**2/g)]_a^b``.

    Returns floats unless an mpmath context is passed, in which case values stay
    at that context's precision.
    """
    if mp is None:
        # the recursion amplifies rounding by about one digit per step
        with mpmath.workdps(30 + n_max):
            return [float(v) for v in lambda_integrals(n_max, interval, gamma_param, mpmath.mp)]
    ctx = mp
    a, b = interval
    g = ctx.mpf(gamma_param)
    out = [ctx.mpf(0)] * (n_max + 1)
    if not a < b:
        return out
    sg = ctx.sqrt(g)

    def boundary(p):
        val = ctx.mpf(0)
        for x, sign in ((b, 1), (a, -1)):
            if math.isinf(x):
                continue
            xm = ctx.mpf(x)
            val += sign * xm**p * ctx.exp(-xm * xm / g)
        return val

    out[0] = ctx.sqrt(ctx.pi * g) / 2 * (ctx.erf(ctx.mpf(b) / sg) - ctx.erf(ctx.mpf(a) / sg))
    if n_max >= 1:
        out[1] = -g / 2 * boundary(0)
    for n in range(2, n_max + 1):
        out[n] = g / 2 * (n - 1) * out[n - 2] - g / 2 * boundary(n - 1)
    return out


@lru_cache(maxsize=None)
def _hermite_function_coefficients(cutoff: int, dps: int):
    """Monomial coefficients of ``H_mu(y) / sqrt(2**mu mu!)`` for mu <= cutoff (mpmath rows)."""
    with mpmath.workdps(dps):
        rows = []
        for mu in range(cutoff + 1):
            norm = mpmath.sqrt(mpmath.mpf(2) ** mu * mpmath.factorial(mu))
            row = [mpmath.mpf(0)] * (cutoff + 1)
            for m in range(mu // 2 + 1):
                c = (-1) ** m * math.factorial(mu) * 2 ** (mu - 2 * m) // (math.factorial(m) * math.factorial(mu - 2 * m))
                row[mu - 2 * m] = mpmath.mpf(c) / norm
            rows.append(row)
        return rows


def _working_precision(cutoff: int) -> int:
    # log10 of the largest Hermite monomial coefficient squared, plus moment growth
    worst = 0.0
    for mu in range(cutoff + 1):
        for m in range(mu // 2 + 1):
            logc = (
                math.lgamma(mu + 1) + (mu - 2 * m) * math.log(2)
                - math.lgamma(m + 1) - math.lgamma(mu - 2 * m + 1)
                - 0.5 * (mu * math.log(2) + math.lgamma(mu + 1))
            )
            worst = max(worst, logc / math.log(10))
    moment = math.lgamma(cutoff + 0.5) / math.log(10)
    return int(30 + 2 * worst + moment)


def _chi_tilde(cutoff: int, noise: NoiseModel, interval, dps: int):
    """Interval-integrated noisy moments ``chi~_p`` for p = 0 .. 2*cutoff."""
    p_max = 2 * cutoff
    with mpmath.workdps(dps):
        s2 = mpmath.mpf(noise.sigma_n) ** 2
        t2 = mpmath.mpf(VACUUM_VARIANCE) + s2
        lam = lambda_integrals(p_max, interval, 2 * t2, mp=mpmath.mp)
        pref = 1 / (mpmath.sqrt(2 * mpmath.pi) * mpmath.sqrt(t2))
        chi = []
        for n in range(p_max + 1):
            terms = []
            for v in range(n // 2 + 1):
                coeff = mpmath.mpf(math.factorial(n) // (math.factorial(v) * math.factorial(n - 2 * v)))
                terms.append(coeff * s2**v / t2 ** (n - v) * lam[n - 2 * v])
            chi.append(pref * mpmath.fsum(terms) / mpmath.mpf(2) ** n)
        return chi


def povm_element(k: int, noise: NoiseModel, bins: BinningScheme, cutoff: int = DEFAULT_CUTOFF) -> FockOperator:
    """Fock matrix of the noisy binned homodyne POVM element for outcome ``k``."""
    if cutoff > MAX_CUTOFF:
        raise PrecisionLossError(f"cutoff {cutoff} exceeds the supported maximum {MAX_CUTOFF}")
    if cutoff < 0:
        raise ValueError("cutoff must be >= 0")
    if not 0 <= k < bins.outcomes:
        raise IndexError(f"outcome {k} outside [0, {bins.outcomes})")
    return FockOperator(_povm_matrix(k, noise.sigma_n, bins.edges, cutoff))


@lru_cache(maxsize=256)
def _povm_matrix(k: int, sigma_n: float, edges: tuple, cutoff: int) -> np.ndarray:
    noise = NoiseModel(sigma_n)
    interval = (edges[k], edges[k + 1])
    dps = _working_precision(cutoff)
    coeffs = _hermite_function_coefficients(cutoff, dps)
    with mpmath.workdps(dps):
        chi = _chi_tilde(cutoff, noise, interval, dps)
        dim = cutoff + 1
        hankel = mpmath.matrix(dim, dim)
        for i in range(dim):
            for j in range(dim):
                hankel[i, j] = chi[i + j]
        a = mpmath.matrix(coeffs)
        full = a * hankel * a.T
        magnitude = mpmath.matrix([[abs(x) for x in row] for row in coeffs])
        habs = mpmath.matrix(dim, dim)
        for i in range(dim):
            for j in range(dim):
                habs[i, j] = abs(chi[i + j])
        bound = magnitude * habs * magnitude.T
        out = np.empty((dim, dim))
        ulp = mpmath.mpf(10) ** (2 - dps)
        for i in range(dim):
            for j in range(dim):
                out[i, j] = float(full[i, j])
                # rounding error of the alternating sum is bounded by |terms| * ulp
                if bound[i, j] * ulp > 1e-6 * max(abs(out[i, j]), 1e-16):
                    raise PrecisionLossError(
                        f"element ({i},{j}) of outcome {k}: cancellation exceeds working precision {dps}"
                    )
    out.setflags(write=False)
    return out


def povm_elements(noise: NoiseModel, bins: BinningScheme, cutoff: int = DEFAULT_CUTOFF) -> list[FockOperator]:
    return [povm_element(k, noise, bins, cutoff) for k in range(bins.outcomes)]


def gamma_map_operators(elements: Sequence[FockOperator], gamma: float) -> list[FockOperator]:
    """Operator version of the ADC imbalance map."""
    if len(elements) % 2:
        raise ValueError("gamma imbalance needs an even number of outcomes")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    out = []
    for k, el in enumerate(elements):
        if k % 2 == 0:
            out.append(FockOperator(el.matrix + gamma * elements[k + 1].matrix))
        else:
            out.append(FockOperator((1.0 - gamma) * el.matrix))
    return out


def coherent_vector(alpha: float, cutoff: int, renormalize: bool = True) -> np.ndarray:
    """Fock amplitudes ``exp(-alpha**2/2) alpha**n / sqrt(n!)`` for n <= cutoff."""
    c = np.empty(cutoff + 1)
    c[0] = math.exp(-0.5 * alpha * alpha)
    for n in range(1, cutoff + 1):
        c[n] = c[n - 1] * alpha / math.sqrt(n)
    if renormalize:
        c /= np.linalg.norm(c)
    return c


def coherent_state(alpha: float, cutoff: int, renormalize: bool = True) -> np.ndarray:
    v = coherent_vector(alpha, cutoff, renormalize)
    return np.outer(v, v)
