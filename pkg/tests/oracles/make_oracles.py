"""Regenerate the frozen oracle values in values.json.

Every value here comes from brute-force numerical integration that shares no
code with the package: midpoint sums for bin probabilities, adaptive
quadrature for moment integrals and nested quadrature for POVM matrix
elements. Run once; the tests only read the JSON.
"""
import json
import math
from pathlib import Path

import numpy as np
from scipy import integrate
from scipy.special import eval_hermite, factorial

OUT = Path(__file__).with_name("values.json")


def edges_fixed(depth, r):
    d = 2**depth
    if d == 2:
        return [-math.inf, 0.0, math.inf]
    w = 2 * r / (d - 2)
    return [-math.inf] + [-r + j * w for j in range(d - 1)] + [math.inf]


def midpoint_bins(alpha, sigma_n, depth, r, panels=1_000_000):
    mean = math.sqrt(2) * alpha
    s = math.sqrt(0.5 + sigma_n**2)
    e = edges_fixed(depth, r)
    out = []
    for a, b in zip(e[:-1], e[1:]):
        a = max(a, mean - 14 * s)
        b = min(b, mean + 14 * s)
        h = (b - a) / panels
        x = a + h * (np.arange(panels) + 0.5)
        f = np.exp(-((x - mean) ** 2) / (2 * s * s)) / (math.sqrt(2 * math.pi) * s)
        out.append(float(f.sum() * h))
    return out


def convolution_bins(alpha, sigma_n, depth, r):
    # bin integral of the vacuum-shifted Gaussian convolved with electronic noise
    mean = math.sqrt(2) * alpha
    e = edges_fixed(depth, r)

    def density(x):
        g = lambda y: (math.exp(-((y - mean) ** 2)) / math.sqrt(math.pi)
                       * math.exp(-((x - y) ** 2) / (2 * sigma_n**2)) / (math.sqrt(2 * math.pi) * sigma_n))
        return integrate.quad(g, x - 12 * sigma_n, x + 12 * sigma_n, epsabs=1e-14, epsrel=1e-13, limit=200)[0]

    out = []
    for a, b in zip(e[:-1], e[1:]):
        a = max(a, mean - 12)
        b = min(b, mean + 12)
        out.append(integrate.quad(density, a, b, epsabs=1e-13, epsrel=1e-12, limit=400)[0])
    return out


def moment_integral(n, a, b, g):
    return integrate.quad(lambda x: math.exp(-x * x / g) * x**n, a, b, epsabs=1e-15, epsrel=1e-14, limit=400)[0]


def wavefunction(mu, y):
    return eval_hermite(mu, y) * math.exp(-y * y / 2) / math.sqrt(2.0**mu * factorial(mu) * math.sqrt(math.pi))


def povm_nested(k, sigma_n, depth, r, dim):
    e = edges_fixed(depth, r)
    a, b = e[k], e[k + 1]

    def bin_mass(y):
        # inner integral of the noise kernel over the bin, done numerically
        lo, hi = max(a, y - 12 * sigma_n), min(b, y + 12 * sigma_n)
        if lo >= hi:
            return 0.0
        f = lambda x: math.exp(-((x - y) ** 2) / (2 * sigma_n**2)) / (math.sqrt(2 * math.pi) * sigma_n)
        return integrate.quad(f, lo, hi, epsabs=1e-15, epsrel=1e-13)[0]

    brk = [p for p in (a, b) if math.isfinite(p)]
    m = np.zeros((dim, dim))
    for mu in range(dim):
        for nu in range(mu, dim):
            f = lambda y: wavefunction(mu, y) * wavefunction(nu, y) * bin_mass(y)
            pts = sorted(set(brk + [p + s * sigma_n * t for p in brk for s in (-1, 1) for t in (1, 3, 6)]))
            val = integrate.quad(f, -12, 12, points=pts, epsabs=1e-13, epsrel=1e-12, limit=800)[0]
            m[mu, nu] = m[nu, mu] = val
    return m.tolist()


def main():
    out = {
        "bin_probabilities": {
            "alpha": 0.5, "sigma_n": 0.1, "bit_depth": 2, "range_r": 1.5,
            "midpoint": midpoint_bins(0.5, 0.1, 2, 1.5),
            "convolution": convolution_bins(0.5, 0.1, 2, 1.5),
        },
        "moment_integrals": [
            {"n": n, "a": a, "b": b, "g": g, "value": moment_integral(n, a, b, g)}
            for n, a, b, g in [(4, 0.0, 1.5, 1.0), (0, -0.3, 0.7, 2.0), (7, -1.0, 2.0, 1.1), (12, 0.5, 3.0, 1.2)]
        ],
        "povm_elements": {
            "sigma_n": 0.1, "bit_depth": 2, "range_r": 1.5, "dim": 5,
            "matrices": [povm_nested(k, 0.1, 2, 1.5, 5) for k in range(4)],
        },
        "hoeffding": {"epsilon": 1e-9, "n": 1_000_000, "value": math.sqrt(math.log(1e9) / 2e6)},
    }
    OUT.write_text(json.dumps(out, indent=1) + "\n")


if __name__ == "__main__":
    main()
