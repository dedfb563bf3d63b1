"""
operators.py — activations, losses, regularizers and the scalar proximal solvers
used by the block updates.

Every scalar solver is vectorized: it accepts floats or equally-shaped arrays and
applies elementwise. Scalar inputs give a Python float back.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

from bcdtrain.errors import ShapeError, UnsupportedError
from bcdtrain.linalg import Matrix

INDICATOR_SLACK = 1e-12


# ── Kinds ──────────────────────────────────────────────────────────────────

class ActKind(str, Enum):
    IDENTITY   = "identity"
    RELU       = "relu"
    LEAKY_RELU = "leaky_relu"
    SIGMOID    = "sigmoid"
    TANH       = "tanh"


@dataclass(frozen=True)
class Activation:
    kind:  ActKind
    slope: float = 0.0

    def __post_init__(self):
        if self.kind is ActKind.LEAKY_RELU and not 0.0 < self.slope < 1.0:
            raise ValueError(f"leaky_relu slope must lie in (0,1), got {self.slope}")

    @classmethod
    def parse(cls, text: str) -> "Activation":
        name, _, arg = text.strip().lower().partition(":")
        kind = ActKind(name)
        if kind is ActKind.LEAKY_RELU:
            return cls(kind, float(arg) if arg else 0.01)
        if arg:
            raise ValueError(f"activation {name!r} takes no parameter")
        return cls(kind)

    @property
    def smooth(self) -> bool:
        return self.kind in (ActKind.SIGMOID, ActKind.TANH)

    def __str__(self) -> str:
        if self.kind is ActKind.LEAKY_RELU:
            return f"{self.kind.value}:{self.slope!r}"
        return self.kind.value


IDENTITY = Activation(ActKind.IDENTITY)


class LossKind(str, Enum):
    SQUARED       = "squared"
    HINGE         = "hinge"
    CROSS_ENTROPY = "cross_entropy"

    @property
    def differentiable(self) -> bool:
        return self is not LossKind.HINGE


class RegKind(str, Enum):
    NONE    = "none"
    FRO     = "fro"
    L1      = "l1"
    ELASTIC = "elastic"
    NONNEG  = "nonneg"
    BOX     = "box"


@dataclass(frozen=True)
class Regularizer:
    """r_i / s_i. `lam` weighs ||.||_F^2 (fro) or ||.||_1 (l1, elastic); `lam2`
    is the squared-Frobenius weight of the elastic net."""
    kind: RegKind = RegKind.NONE
    lam:  float   = 0.0
    lam2: float   = 0.0
    lo:   float   = 0.0
    hi:   float   = 1.0

    def __post_init__(self):
        if self.kind in (RegKind.FRO, RegKind.L1, RegKind.ELASTIC) and self.lam <= 0:
            raise ValueError(f"{self.kind.value} weight must be positive, got {self.lam}")
        if self.kind is RegKind.ELASTIC and self.lam2 <= 0:
            raise ValueError(f"elastic squared weight must be positive, got {self.lam2}")
        if self.kind is RegKind.BOX and not self.lo < self.hi:
            raise ValueError(f"box needs lo < hi, got [{self.lo}, {self.hi}]")

    @classmethod
    def parse(cls, text: str) -> "Regularizer":
        name, *args = text.strip().lower().split(":")
        kind = RegKind(name)
        vals = [float(a) for a in args]
        expected = {RegKind.NONE: 0, RegKind.NONNEG: 0, RegKind.FRO: 1,
                    RegKind.L1: 1, RegKind.ELASTIC: 2, RegKind.BOX: 2}[kind]
        if len(vals) != expected:
            raise ValueError(f"regularizer {name!r} takes {expected} parameter(s), got {len(vals)}")
        if kind in (RegKind.FRO, RegKind.L1):
            return cls(kind, lam=vals[0])
        if kind is RegKind.ELASTIC:
            return cls(kind, lam=vals[0], lam2=vals[1])
        if kind is RegKind.BOX:
            return cls(kind, lo=vals[0], hi=vals[1])
        return cls(kind)

    @property
    def is_indicator(self) -> bool:
        return self.kind in (RegKind.NONNEG, RegKind.BOX)

    @property
    def quadratic(self) -> bool:
        """True when the regularizer keeps a block subproblem a linear system."""
        return self.kind in (RegKind.NONE, RegKind.FRO)

    @property
    def fro_weight(self) -> float:
        return self.lam if self.kind is RegKind.FRO else 0.0

    def __str__(self) -> str:
        if self.kind in (RegKind.FRO, RegKind.L1):
            return f"{self.kind.value}:{self.lam!r}"
        if self.kind is RegKind.ELASTIC:
            return f"{self.kind.value}:{self.lam!r}:{self.lam2!r}"
        if self.kind is RegKind.BOX:
            return f"{self.kind.value}:{self.lo!r}:{self.hi!r}"
        return self.kind.value


NO_REG = Regularizer()


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


# ── Activations ────────────────────────────────────────────────────────────

def activation_apply(act: Activation, A):
    k = act.kind
    if k is ActKind.IDENTITY:
        return np.array(A, dtype=np.float64, copy=True)
    if k is ActKind.RELU:
        return np.maximum(A, 0.0)
    if k is ActKind.LEAKY_RELU:
        return np.where(A >= 0.0, A, act.slope * np.asarray(A))
    if k is ActKind.SIGMOID:
        return expit(A)
    return np.tanh(A)


def activation_derivative(act: Activation, A):
    """Derivative, or the subgradient selection sigma'(0) = 0 (ReLU) / slope (LeakyReLU)."""
    k = act.kind
    A = np.asarray(A, dtype=np.float64)
    if k is ActKind.IDENTITY:
        return np.ones_like(A)
    if k is ActKind.RELU:
        return (A > 0.0).astype(np.float64)
    if k is ActKind.LEAKY_RELU:
        return np.where(A > 0.0, 1.0, act.slope)
    if k is ActKind.SIGMOID:
        s = expit(A)
        return s * (1.0 - s)
    t = np.tanh(A)
    return 1.0 - t * t


def activation_local_lipschitz(act: Activation, bound: float) -> float:
    if bound <= 0:
        raise ValueError(f"bound must be positive, got {bound}")
    if act.kind is ActKind.SIGMOID:
        return 0.25
    if act.kind is ActKind.LEAKY_RELU:
        return max(1.0, act.slope)
    return 1.0


# ── Losses ─────────────────────────────────────────────────────────────────

def _check_pair(V: Matrix, Y: Matrix) -> None:
    if V.shape != Y.shape:
        raise ShapeError(f"risk needs matching shapes, got V_N {V.shape} and Y {Y.shape}")


def loss_targets(loss: LossKind, Y: Matrix) -> Matrix:
    """Training targets for a loss: +/-1 codes for hinge, the one-hot Y otherwise."""
    if loss is LossKind.HINGE:
        return 2.0 * Y - 1.0
    return Y


def risk_value(loss: LossKind, V: Matrix, Y: Matrix) -> float:
    _check_pair(V, Y)
    n = V.shape[1]
    if loss is LossKind.SQUARED:
        D = V - Y
        return 0.5 * float(np.dot(D.ravel(), D.ravel())) / n
    if loss is LossKind.HINGE:
        return float(np.sum(np.maximum(0.0, 1.0 - V * Y))) / n
    # sigmoid cross-entropy: -y log s(u) - (1-y) log(1-s(u)) = softplus(u) - y u
    return float(np.sum(np.logaddexp(0.0, V) - Y * V)) / n


def risk_gradient(loss: LossKind, V: Matrix, Y: Matrix) -> Matrix:
    if not loss.differentiable:
        raise UnsupportedError("risk_gradient: hinge loss is not differentiable; use hinge_prox")
    _check_pair(V, Y)
    n = V.shape[1]
    if loss is LossKind.SQUARED:
        return (V - Y) / n
    return (expit(V) - Y) / n


def risk_grad_lipschitz(loss: LossKind, n: int, d_N: int = 1) -> float:
    """Global Lipschitz constant of the risk gradient (Frobenius norm)."""
    if not loss.differentiable:
        raise UnsupportedError("risk_grad_lipschitz: hinge loss has no Lipschitz gradient")
    if loss is LossKind.SQUARED:
        return 1.0 / n
    # per-coordinate sigmoid curvature is at most 1/4
    return 1.0 / (4.0 * n)


# ── Scalar proximal solvers ────────────────────────────────────────────────

def relu_quad_prox(a, b, gamma: float):
    """argmin_u 1/2 (max(0,u) - a)^2 + gamma/2 (u - b)^2, four-case closed form."""
    if np.any(np.asarray(gamma) <= 0):
        raise ValueError(f"gamma must be positive, got {gamma}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    gb = gamma * b
    thr = -(np.sqrt(gamma * (gamma + 1.0)) - gamma) * a
    lin = (a + gb) / (1.0 + gamma)
    neg = np.minimum(b, 0.0)

    # rounding can leave a point between the cases; compare the one-sided minimizers
    pos = np.maximum(lin, 0.0)
    f_pos = 0.5 * (np.maximum(pos, 0.0) - a) ** 2 + 0.5 * gamma * (pos - b) ** 2
    f_neg = 0.5 * (np.maximum(neg, 0.0) - a) ** 2 + 0.5 * gamma * (neg - b) ** 2
    fallback = np.where(f_pos <= f_neg, pos, neg)

    out = np.select(
        [
            (a + gb >= 0.0) & (b >= 0.0),
            (thr <= gb) & (gb < 0.0),
            (-a <= gb) & (gb <= thr) & (thr < 0.0),
            a + gb < 0.0,
        ],
        [lin, lin, b, neg],
        default=fallback,
    )
    return _out(out)


def leaky_relu_quad_prox(a, b, gamma: float, slope: float):
    """argmin_u 1/2 (leaky(u) - a)^2 + gamma/2 (u - b)^2.

    Each linear piece is a strictly convex quadratic; its minimizer clamped to the
    piece's half-line is compared against the other piece's. Ties go to u >= 0.
    """
    if np.any(np.asarray(gamma) <= 0):
        raise ValueError(f"gamma must be positive, got {gamma}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    u_pos = np.maximum((a + gamma * b) / (1.0 + gamma), 0.0)
    u_neg = np.minimum((slope * a + gamma * b) / (slope * slope + gamma), 0.0)
    f_pos = 0.5 * (u_pos - a) ** 2 + 0.5 * gamma * (u_pos - b) ** 2
    f_neg = 0.5 * (slope * u_neg - a) ** 2 + 0.5 * gamma * (u_neg - b) ** 2
    return _out(np.where(f_pos <= f_neg, u_pos, u_neg))


def hinge_prox(a, b, gamma):
    """argmin_u max(0, 1 - a u) + gamma/2 (u - b)^2."""
    if np.any(np.asarray(gamma) <= 0):
        raise ValueError("gamma must be positive")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = a * b
    safe_a = np.where(a == 0.0, 1.0, a)
    out = np.select(
        [a == 0.0, ab <= 1.0 - a * a / gamma, ab < 1.0],
        [b, b + a / gamma, 1.0 / safe_a],
        default=b,
    )
    return _out(out)


def _smooth_objective(act: Activation, u, v, b, g):
    s = activation_apply(act, u)
    return 0.5 * (s - v) ** 2 + 0.5 * g * (u - b) ** 2


def smooth_scalar_quad_min(act: Activation, v, b, gamma_eff: float, *,
                           grid: int = 2048, keep: int = 3, refine_iters: int = 80,
                           chunk: int = 256):
    """Global minimizer of 1/2 (sigma(u) - v)^2 + g/2 (u - b)^2 for sigmoid / tanh.

    Scan 2048 points of [b - h, b + h], h = (1+|v|)/g + 4, then ternary-refine the
    brackets of the `keep` best local grid minima.
    """
    if not act.smooth:
        raise UnsupportedError(f"smooth_scalar_quad_min handles sigmoid/tanh, got {act}")
    if gamma_eff <= 0:
        raise ValueError(f"gamma_eff must be positive, got {gamma_eff}")
    v_arr, b_arr = np.broadcast_arrays(np.asarray(v, dtype=np.float64),
                                       np.asarray(b, dtype=np.float64))
    shape = v_arr.shape
    vf = v_arr.ravel()
    bf = b_arr.ravel()
    out = np.empty_like(bf)
    t = np.linspace(0.0, 1.0, grid)
    g = gamma_eff

    for start in range(0, vf.size, chunk):
        vv = vf[start:start + chunk, None]
        bb = bf[start:start + chunk, None]
        half = (1.0 + np.abs(vv)) / g + 4.0
        lo = bb - half
        pts = lo + (2.0 * half) * t[None, :]
        f = _smooth_objective(act, pts, vv, bb, g)

        # local minima of the sampled curve (ends count when lower than their neighbour)
        left = np.concatenate([np.full((f.shape[0], 1), np.inf), f[:, :-1]], axis=1)
        right = np.concatenate([f[:, 1:], np.full((f.shape[0], 1), np.inf)], axis=1)
        masked = np.where((f <= left) & (f <= right), f, np.inf)
        k = min(keep, grid)
        cand = np.argpartition(masked, k - 1, axis=1)[:, :k]
        best_grid = np.argmin(f, axis=1)
        cand = np.where(np.isfinite(np.take_along_axis(masked, cand, axis=1)),
                        cand, best_grid[:, None])

        rows = np.arange(f.shape[0])[:, None]
        lo_b = pts[rows, np.maximum(cand - 1, 0)]
        hi_b = pts[rows, np.minimum(cand + 1, grid - 1)]
        vk = np.broadcast_to(vv, lo_b.shape)
        bk = np.broadcast_to(bb, lo_b.shape)
        for _ in range(refine_iters):
            m1 = lo_b + (hi_b - lo_b) / 3.0
            m2 = hi_b - (hi_b - lo_b) / 3.0
            go_left = _smooth_objective(act, m1, vk, bk, g) < _smooth_objective(act, m2, vk, bk, g)
            hi_b = np.where(go_left, m2, hi_b)
            lo_b = np.where(go_left, lo_b, m1)
        xs = 0.5 * (lo_b + hi_b)
        fx = _smooth_objective(act, xs, vk, bk, g)
        pick = np.argmin(fx, axis=1)
        out[start:start + chunk] = xs[np.arange(xs.shape[0]), pick]

    return _out(out.reshape(shape))


def activation_prox(act: Activation, v, b, gamma_eff: float):
    """argmin_u 1/2 (sigma(u) - v)^2 + gamma_eff/2 (u - b)^2 for any activation."""
    k = act.kind
    if k is ActKind.IDENTITY:
        return (np.asarray(v) + gamma_eff * np.asarray(b)) / (1.0 + gamma_eff)
    if k is ActKind.RELU:
        return relu_quad_prox(v, b, gamma_eff)
    if k is ActKind.LEAKY_RELU:
        return leaky_relu_quad_prox(v, b, gamma_eff, act.slope)
    return smooth_scalar_quad_min(act, v, b, gamma_eff)


# ── Regularizers ───────────────────────────────────────────────────────────

def reg_value(reg: Regularizer, X) -> float:
    k = reg.kind
    X = np.asarray(X, dtype=np.float64)
    if k is RegKind.NONE:
        return 0.0
    if k is RegKind.FRO:
        return reg.lam * float(np.dot(X.ravel(), X.ravel()))
    if k is RegKind.L1:
        return reg.lam * float(np.sum(np.abs(X)))
    if k is RegKind.ELASTIC:
        return reg.lam * float(np.sum(np.abs(X))) + reg.lam2 * float(np.dot(X.ravel(), X.ravel()))
    if k is RegKind.NONNEG:
        return 0.0 if np.all(X >= -INDICATOR_SLACK) else math.inf
    inside = np.all(X >= reg.lo - INDICATOR_SLACK) and np.all(X <= reg.hi + INDICATOR_SLACK)
    return 0.0 if inside else math.inf


def _soft(C, tau):
    return np.sign(C) * np.maximum(np.abs(C) - tau, 0.0)


def reg_quad_argmin(reg: Regularizer, C, rho: float):
    """argmin_X reg(X) + rho/2 ||X - C||_F^2, elementwise."""
    if np.any(np.asarray(rho) <= 0):
        raise ValueError(f"rho must be positive, got {rho}")
    k = reg.kind
    C = np.asarray(C, dtype=np.float64)
    if k is RegKind.NONE:
        out = C.copy()
    elif k is RegKind.FRO:
        out = rho * C / (rho + 2.0 * reg.lam)
    elif k is RegKind.L1:
        out = _soft(C, reg.lam / rho)
    elif k is RegKind.ELASTIC:
        out = _soft(C, reg.lam / rho) * (rho / (rho + 2.0 * reg.lam2))
    elif k is RegKind.NONNEG:
        out = np.maximum(C, 0.0)
    else:
        out = np.clip(C, reg.lo, reg.hi)
    return _out(out)


def project(reg: Regularizer, X: Matrix) -> Matrix:
    """Projection onto dom(reg); identity for finite-valued regularizers."""
    if reg.is_indicator:
        return reg_quad_argmin(reg, X, 1.0)
    return X
