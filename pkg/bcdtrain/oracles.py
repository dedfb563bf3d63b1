"""
oracles.py — brute-force references for the closed forms: dense grid search with
ternary refinement, and central finite differences. Used by `prox-check` and the
test suite.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from bcdtrain.linalg import Matrix
from bcdtrain.operators import (
    ActKind,
    Activation,
    RegKind,
    Regularizer,
    activation_apply,
    hinge_prox,
    leaky_relu_quad_prox,
    reg_quad_argmin,
    relu_quad_prox,
    smooth_scalar_quad_min,
)

logger = logging.getLogger(__name__)

GRID_POINTS = 100_000
PROX_ATOL   = 1e-8


def grid_minimize(f: Callable, lo, hi, params=(), *, points: int = GRID_POINTS,
                  refine_iters: int = 60, chunk: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Minimize m scalar problems f(u, *params) over [lo, hi] each.

    f receives u of shape (rows, k) and every param as a (rows, 1) column.
    Returns (argmin, min) per problem; the refined point only replaces the grid
    point when it is lower.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
    params = [np.broadcast_to(np.asarray(p, dtype=np.float64), lo.shape) for p in params]
    t = np.linspace(0.0, 1.0, points)
    best_u = np.empty_like(lo)
    best_f = np.empty_like(lo)

    for s in range(0, lo.size, chunk):
        sl = slice(s, s + chunk)
        cols = [p[sl, None] for p in params]
        width = (hi[sl] - lo[sl])[:, None]
        pts = lo[sl, None] + width * t[None, :]
        vals = f(pts, *cols)
        j = np.argmin(vals, axis=1)
        rows = np.arange(pts.shape[0])
        u_grid = pts[rows, j]
        f_grid = vals[rows, j]

        left = pts[rows, np.maximum(j - 1, 0)][:, None]
        right = pts[rows, np.minimum(j + 1, points - 1)][:, None]
        for _ in range(refine_iters):
            m1 = left + (right - left) / 3.0
            m2 = right - (right - left) / 3.0
            go_left = f(m1, *cols) < f(m2, *cols)
            right = np.where(go_left, m2, right)
            left = np.where(go_left, left, m1)
        u_ref = 0.5 * (left + right)
        f_ref = f(u_ref, *cols)[:, 0]
        better = f_ref < f_grid
        best_u[sl] = np.where(better, u_ref[:, 0], u_grid)
        best_f[sl] = np.where(better, f_ref, f_grid)
    return best_u, best_f


# ── Scalar objectives ──────────────────────────────────────────────────────

def relu_objective(u, a, b, gamma):
    return 0.5 * (np.maximum(u, 0.0) - a) ** 2 + 0.5 * gamma * (u - b) ** 2


def leaky_objective(u, a, b, gamma, slope):
    return 0.5 * (np.where(u >= 0.0, u, slope * u) - a) ** 2 + 0.5 * gamma * (u - b) ** 2


def hinge_objective(u, a, b, gamma):
    return np.maximum(0.0, 1.0 - a * u) + 0.5 * gamma * (u - b) ** 2


def smooth_objective(act: Activation):
    def f(u, v, b, gamma):
        return 0.5 * (activation_apply(act, u) - v) ** 2 + 0.5 * gamma * (u - b) ** 2
    return f


def reg_scalar_objective(reg: Regularizer):
    """Entrywise reg(u) + rho/2 (u - c)^2; indicator sets are enforced by the search interval."""
    def f(u, c, rho):
        q = 0.5 * rho * (u - c) ** 2
        if reg.kind is RegKind.FRO:
            return q + reg.lam * u * u
        if reg.kind is RegKind.L1:
            return q + reg.lam * np.abs(u)
        if reg.kind is RegKind.ELASTIC:
            return q + reg.lam * np.abs(u) + reg.lam2 * u * u
        return q
    return f


# ── Oracles ────────────────────────────────────────────────────────────────

def relu_oracle(a, b, gamma, **kw):
    a, b = np.atleast_1d(a), np.atleast_1d(b)
    lo = np.minimum(np.minimum(a, b), 0.0) - 1.0
    hi = np.maximum(np.maximum(a, b), 0.0) + 1.0
    return grid_minimize(relu_objective, lo, hi, (a, b, gamma), **kw)


def leaky_oracle(a, b, gamma, slope, **kw):
    a, b = np.atleast_1d(a), np.atleast_1d(b)
    lo = np.minimum(np.minimum(a / slope, b), 0.0) - 1.0
    hi = np.maximum(np.maximum(a, b), 0.0) + 1.0
    return grid_minimize(leaky_objective, lo, hi, (a, b, gamma, slope), **kw)


def hinge_oracle(a, b, gamma, **kw):
    # the minimizer sits between b and b + a/gamma (hinge subgradients lie in [-a, 0])
    a, b = np.atleast_1d(a), np.atleast_1d(b)
    ends = np.stack([b, b + a / gamma])
    return grid_minimize(hinge_objective, ends.min(axis=0) - 1.0, ends.max(axis=0) + 1.0, (a, b, gamma), **kw)


def smooth_oracle(act: Activation, v, b, gamma, **kw):
    v, b = np.atleast_1d(v), np.atleast_1d(b)
    half = (1.0 + np.abs(v)) / gamma + 5.0
    return grid_minimize(smooth_objective(act), b - half, b + half, (v, b, gamma), **kw)


def reg_oracle(reg: Regularizer, c, rho, **kw):
    c = np.atleast_1d(c)
    if reg.kind is RegKind.NONNEG:
        lo, hi = np.zeros_like(c), np.maximum(c, 0.0) + 1.0
    elif reg.kind is RegKind.BOX:
        lo, hi = np.full_like(c, reg.lo), np.full_like(c, reg.hi)
    else:
        lo, hi = np.minimum(c, 0.0) - 1.0, np.maximum(c, 0.0) + 1.0
    return grid_minimize(reg_scalar_objective(reg), lo, hi, (c, rho), **kw)


def finite_difference_grad(f: Callable[[Matrix], float], X: Matrix, h: float = 1e-6) -> Matrix:
    G = np.zeros_like(X, dtype=np.float64)
    for idx in np.ndindex(X.shape):
        Xp = X.astype(np.float64, copy=True)
        Xm = X.astype(np.float64, copy=True)
        Xp[idx] += h
        Xm[idx] -= h
        G[idx] = (f(Xp) - f(Xm)) / (2.0 * h)
    return G


# ── prox-check ─────────────────────────────────────────────────────────────

@dataclass
class SuiteResult:
    name:      str
    cases:     int
    failures:  int
    worst_gap: float

    @property
    def passed(self) -> bool:
        return self.failures == 0


@dataclass
class ProxCheckReport:
    suites: list[SuiteResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)


def _suite(name: str, got_value: np.ndarray, oracle_value: np.ndarray) -> SuiteResult:
    gap = got_value - oracle_value
    result = SuiteResult(name, gap.size, int(np.sum(gap > PROX_ATOL)), float(np.max(gap, initial=-np.inf)))
    level = logging.INFO if result.passed else logging.WARNING
    logger.log(level, f"[prox-check] {name:<22} cases={result.cases:>6} | failures={result.failures} | "
                      f"worst gap={result.worst_gap:.3e}")
    return result


def prox_check(cases: int = 10_000, seed: int = 7, *, points: int = GRID_POINTS) -> ProxCheckReport:
    """Compare every scalar closed form against the grid oracle on random draws."""
    rng = np.random.default_rng(seed)
    report = ProxCheckReport()
    kw = {"points": points}

    a = rng.uniform(-5.0, 5.0, cases)
    b = rng.uniform(-5.0, 5.0, cases)
    g = rng.uniform(0.1, 10.0, cases)

    got = relu_quad_prox(a, b, g)
    report.suites.append(_suite("relu_quad_prox", relu_objective(got, a, b, g), relu_oracle(a, b, g, **kw)[1]))

    got = hinge_prox(a, b, g)
    report.suites.append(_suite("hinge_prox", hinge_objective(got, a, b, g), hinge_oracle(a, b, g, **kw)[1]))

    slope = 0.1
    got = leaky_relu_quad_prox(a, b, g, slope)
    report.suites.append(_suite("leaky_relu_quad_prox", leaky_objective(got, a, b, g, slope),
                                leaky_oracle(a, b, g, slope, **kw)[1]))

    # the smooth solver and the per-regularizer maps are costlier; a tenth of the draws each
    m = max(1, cases // 10)
    for kind in (ActKind.SIGMOID, ActKind.TANH):
        act = Activation(kind)
        v = rng.uniform(-1.5, 1.5, m)
        bs = rng.uniform(-5.0, 5.0, m)
        gs = rng.uniform(0.1, 10.0, m)
        got = np.array([smooth_scalar_quad_min(act, vi, bi, gi) for vi, bi, gi in zip(v, bs, gs)])
        report.suites.append(_suite(f"smooth_{kind.value}", smooth_objective(act)(got, v, bs, gs),
                                    smooth_oracle(act, v, bs, gs, **kw)[1]))

    for reg in (Regularizer(RegKind.FRO, lam=0.5), Regularizer(RegKind.L1, lam=1.0),
                Regularizer(RegKind.ELASTIC, lam=0.5, lam2=0.25),
                Regularizer(RegKind.NONNEG), Regularizer(RegKind.BOX, lo=-1.0, hi=1.0)):
        c = rng.uniform(-5.0, 5.0, m)
        rho = rng.uniform(0.1, 10.0, m)
        got = reg_quad_argmin(reg, c, rho)
        report.suites.append(_suite(f"reg_quad_argmin[{reg}]", reg_scalar_objective(reg)(got, c, rho),
                                    reg_oracle(reg, c, rho, **kw)[1]))
    return report
