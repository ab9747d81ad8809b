"""Independent numerical oracles for the test-suite.

These evaluate population quantities of the simulation design by
Gauss-Legendre quadrature over the latent factor instead of simulation, so
they share no code with the package.
"""

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

_G, _W = np.polynomial.legendre.leggauss(200)
U_NODES = (_G + 1) / 2
U_WEIGHTS = _W / 2


def arm_laws(x1, sign=1.0):
    """Response probabilities and outcome means on the U grid at covariate x1."""
    u = U_NODES
    base = 1 - 0.2 * x1 - 1.6 * u
    push = sign * (0.4 + 0.1 * x1 + 2 * u)
    s0 = norm.cdf(base)
    s1 = norm.cdf(base + push)
    m0 = 1.5 - 0.6 * u ** 2 + 4 * x1
    m1 = m0 + 2.5 * u + 3 * np.sin(-0.7 + 2 * x1)
    return s0, s1, m0, m1


def conditional_truth(x1, sign=1.0):
    """q(x), trimming quantiles and conditional bounds at x1 (positive direction)."""
    w = U_WEIGHTS
    s0, s1, m0, m1 = arm_laws(x1, sign)
    p0, p1 = (w * s0).sum(), (w * s1).sum()
    q = p0 / p1

    def cdf(c):
        return (w * s1 * norm.cdf(c - m1)).sum() / p1

    y_lo = brentq(lambda c: cdf(c) - q, -40, 40, xtol=1e-12)
    y_hi = brentq(lambda c: cdf(c) - (1 - q), -40, 40, xtol=1e-12)
    th0 = (w * s0 * m0).sum() / p0
    th1_lo = (w * s1 * (m1 * norm.cdf(y_lo - m1) - norm.pdf(y_lo - m1))).sum() / p1 / q
    th1_hi = (w * s1 * (m1 * norm.sf(y_hi - m1) + norm.pdf(y_hi - m1))).sum() / p1 / q
    return dict(q0=p0, q1=p1, q=q, y_lo=y_lo, y_hi=y_hi, theta0=th0,
                lower=th1_lo - th0, upper=th1_hi - th0, density_lo=None)


def nuisance_table(grid=None):
    grid = np.linspace(0, 1, 401) if grid is None else grid
    rows = [conditional_truth(x) for x in grid]
    return grid, {k: np.array([r[k] for r in rows]) for k in ("q0", "q1", "q", "y_lo", "y_hi")}


def true_nuisances(x1):
    """Interpolated true nuisances at each unit's X1."""
    grid, tab = nuisance_table()
    return {k: np.interp(x1, grid, v) for k, v in tab.items()}


def aggregated_truth(nodes=200):
    """Population CTB and TB of the simulation design by quadrature."""
    g, w = np.polynomial.legendre.leggauss(nodes)
    x = (g + 1) / 2
    wx = w / 2
    lo, hi, mass = [], [], []
    for xi in x:
        t = conditional_truth(xi)
        lo.append(t["lower"])
        hi.append(t["upper"])
        mass.append(t["q0"])
    mass = np.array(mass) * wx
    ctb = (float(mass @ lo / mass.sum()), float(mass @ hi / mass.sum()))

    X, U = np.meshgrid(x, U_NODES, indexing="ij")
    W = np.outer(wx, U_WEIGHTS)
    s0, s1, m0, m1 = arm_laws(X)
    P0, P1 = (W * s0).sum(), (W * s1).sum()
    q = P0 / P1
    th0 = (W * s0 * m0).sum() / P0

    def cdf(c):
        return (W * s1 * norm.cdf(c - m1)).sum() / P1

    y_lo = brentq(lambda c: cdf(c) - q, -40, 40, xtol=1e-12)
    y_hi = brentq(lambda c: cdf(c) - (1 - q), -40, 40, xtol=1e-12)
    tl = (W * s1 * (m1 * norm.cdf(y_lo - m1) - norm.pdf(y_lo - m1))).sum() / P1 / q
    tu = (W * s1 * (m1 * norm.sf(y_hi - m1) + norm.pdf(y_hi - m1))).sum() / P1 / q
    tau = 2.5 * U + 3 * np.sin(-0.7 + 2 * X)
    return dict(ctb_lower=ctb[0], ctb_upper=ctb[1], tb_lower=tl - th0, tb_upper=tu - th0,
                ate=float((W * tau).sum()),
                ate_always_responders=float((W * tau * s0).sum() / P0), q=q)
