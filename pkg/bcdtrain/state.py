"""
state.py — network description, the split iterates and the penalized objectives.

Layers are numbered 1..N as in the update formulas. V_0 is the input X, kept on the
state read-only; every other block lives in the lists W, V, U at index i-1.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, NamedTuple

import numpy as np

from bcdtrain.errors import ShapeError, UnsupportedError
from bcdtrain.linalg import Matrix, ensure_finite, fro_norm_sq, matmul
from bcdtrain.operators import (
    IDENTITY,
    NO_REG,
    Activation,
    LossKind,
    Regularizer,
    activation_apply,
    activation_derivative,
    loss_targets,
    reg_value,
    risk_grad_lipschitz,
    risk_value,
)

logger = logging.getLogger(__name__)


class Form(str, Enum):
    TWO_SPLIT   = "two_split"
    THREE_SPLIT = "three_split"
    RESIDUAL    = "residual"

    @property
    def has_pre_activations(self) -> bool:
        return self is not Form.TWO_SPLIT


# ── Network ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class NetworkSpec:
    dims:        tuple[int, ...]
    activations: tuple[Activation, ...]
    residual:    bool = False
    bias:        bool = False

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.dims) < 2 or any(d <= 0 for d in self.dims):
            raise ShapeError(f"dims must hold at least two positive sizes, got {self.dims}")
        if len(self.activations) != self.N:
            raise ShapeError(f"expected {self.N} activations, got {len(self.activations)}")
        if self.activations[-1] != IDENTITY:
            raise ShapeError(f"output activation must be identity, got {self.activations[-1]}")
        if self.residual:
            for i in range(1, self.N):
                if self.dims[i] != self.dims[i - 1]:
                    raise ShapeError(
                        f"residual layer {i} needs d_{i} = d_{i-1}, got {self.dims[i]} vs {self.dims[i-1]}"
                    )

    @classmethod
    def mlp(cls, dims, hidden: Activation, *, residual: bool = False, bias: bool = False) -> "NetworkSpec":
        return cls(tuple(dims), (hidden,) * (len(dims) - 2) + (IDENTITY,), residual, bias)

    @property
    def N(self) -> int:
        return len(self.dims) - 1

    @property
    def skips(self) -> tuple[float, ...]:
        """Identity-skip coefficient per layer: 1 where the residual shapes line up."""
        return tuple(
            1.0 if self.residual and self.dims[i] == self.dims[i - 1] else 0.0
            for i in range(1, self.N + 1)
        )

    def skip(self, i: int) -> float:
        return self.skips[i - 1] if 1 <= i <= self.N else 0.0

    def act(self, i: int) -> Activation:
        return self.activations[i - 1]

    def weight_shape(self, i: int) -> tuple[int, int]:
        return self.dims[i], self.dims[i - 1] + (1 if self.bias else 0)


def aug(V: Matrix, bias: bool) -> Matrix:
    """Append the constant 1-row fed to the next layer's bias column."""
    if not bias:
        return V
    return np.vstack([V, np.ones((1, V.shape[1]))])


def split_weight(W: Matrix, bias: bool) -> tuple[Matrix, Matrix | None]:
    """(W without the bias column, bias column as d x 1) for a layer weight."""
    if not bias:
        return W, None
    return W[:, :-1], W[:, -1:]


# ── Hyperparameters ────────────────────────────────────────────────────────

class OrderKind(str, Enum):
    BACKWARD = "backward"
    FORWARD  = "forward"
    CUSTOM   = "custom"


@dataclass(frozen=True)
class UpdateOrder:
    kind:   OrderKind       = OrderKind.BACKWARD
    layers: tuple[int, ...] = ()

    @classmethod
    def parse(cls, text: str) -> "UpdateOrder":
        name, _, rest = text.strip().lower().partition(":")
        kind = OrderKind(name)
        if kind is OrderKind.CUSTOM:
            layers = tuple(int(p) for p in rest.split(",") if p.strip())
            if not layers:
                raise ValueError("custom order needs a layer list, e.g. custom:2,1")
            return cls(kind, layers)
        if rest:
            raise ValueError(f"order {name!r} takes no layer list")
        return cls(kind)

    def sequence(self, N: int) -> list[int]:
        if self.kind is OrderKind.BACKWARD:
            return list(range(N, 0, -1))
        if self.kind is OrderKind.FORWARD:
            return list(range(1, N + 1))
        if sorted(self.layers) != list(range(1, N + 1)):
            raise ValueError(f"custom order {self.layers} is not a permutation of 1..{N}")
        return list(self.layers)

    def __str__(self) -> str:
        if self.kind is OrderKind.CUSTOM:
            return "custom:" + ",".join(str(i) for i in self.layers)
        return self.kind.value


class VnStrategy(str, Enum):
    EXACT       = "exact"
    PROX_LINEAR = "prox_linear"


@dataclass(frozen=True)
class Hyperparams:
    gamma:        float                   = 1.0
    alpha:        float                   = 1.0
    loss:         LossKind                = LossKind.SQUARED
    w_reg:        tuple[Regularizer, ...] = (NO_REG,)
    v_reg:        tuple[Regularizer, ...] = (NO_REG,)
    update_order: UpdateOrder             = field(default_factory=UpdateOrder)
    vn_strategy:  VnStrategy | None       = None
    inner_iters:  int                     = 100
    inner_tol:    float                   = 1e-10
    seed:         int                     = 0
    batch_size:   int | None              = None

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.inner_iters < 1 or not self.inner_tol > 0:
            raise ValueError("inner_iters must be >= 1 and inner_tol > 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        object.__setattr__(self, "w_reg", tuple(self.w_reg))
        object.__setattr__(self, "v_reg", tuple(self.v_reg))

        strategy = self.vn_strategy
        if strategy is None:
            strategy = VnStrategy.PROX_LINEAR if self.loss is LossKind.CROSS_ENTROPY else VnStrategy.EXACT
        if self.loss is LossKind.CROSS_ENTROPY and strategy is VnStrategy.EXACT:
            raise UnsupportedError("cross_entropy loss needs the prox_linear output update")
        if self.loss is LossKind.HINGE and strategy is VnStrategy.PROX_LINEAR:
            raise UnsupportedError("hinge loss has no gradient; use the exact output update")
        object.__setattr__(self, "vn_strategy", strategy)

    @property
    def prox_linear(self) -> bool:
        return self.vn_strategy is VnStrategy.PROX_LINEAR

    def w_reg_of(self, i: int) -> Regularizer:
        return self.w_reg[0] if len(self.w_reg) == 1 else self.w_reg[i - 1]

    def v_reg_of(self, i: int) -> Regularizer:
        return self.v_reg[0] if len(self.v_reg) == 1 else self.v_reg[i - 1]

    def check_layers(self, N: int) -> None:
        for name, regs in (("w_reg", self.w_reg), ("v_reg", self.v_reg)):
            if len(regs) not in (1, N):
                raise ShapeError(f"{name} needs 1 or {N} entries, got {len(regs)}")
        self.update_order.sequence(N)

    def risk_lipschitz(self, n: int, d_N: int) -> float:
        return risk_grad_lipschitz(self.loss, n, d_N) if self.loss.differentiable else 0.0

    def check_prox_linear(self, n: int, d_N: int) -> None:
        """alpha > max(0, (L_R - gamma)/2) keeps the linearized output update a descent step."""
        if not self.prox_linear:
            return
        L_R = self.risk_lipschitz(n, d_N)
        if not self.alpha > max(0.0, (L_R - self.gamma) / 2.0):
            raise UnsupportedError(
                f"prox_linear needs alpha > {max(0.0, (L_R - self.gamma) / 2.0):.6g} (L_R={L_R:.6g})"
            )


# ── Iterates ───────────────────────────────────────────────────────────────

class Block(NamedTuple):
    kind:  str
    layer: int

    def __str__(self) -> str:
        return f"{self.kind}{self.layer}"


@dataclass
class SplitState:
    """Q = (W, V) for two-splitting, P = (W, V, U) otherwise. Arrays are never
    written in place; updates swap whole matrices."""
    spec: NetworkSpec
    X:    Matrix
    W:    list[Matrix]
    V:    list[Matrix]
    U:    list[Matrix] | None = None

    @property
    def n(self) -> int:
        return self.X.shape[1]

    def v(self, i: int) -> Matrix:
        return self.X if i == 0 else self.V[i - 1]

    def input_of(self, i: int) -> Matrix:
        """aug(V_{i-1}), the matrix W_i multiplies."""
        return aug(self.v(i - 1), self.spec.bias)

    def get(self, block: Block) -> Matrix:
        return self._store(block.kind)[block.layer - 1]

    def set(self, block: Block, value: Matrix) -> None:
        self._store(block.kind)[block.layer - 1] = value

    def _store(self, kind: str) -> list[Matrix]:
        if kind == "W":
            return self.W
        if kind == "V":
            return self.V
        if kind == "U" and self.U is not None:
            return self.U
        raise ShapeError(f"state has no {kind} blocks")

    def with_block(self, block: Block, value: Matrix) -> "SplitState":
        other = self.copy()
        other.set(block, value)
        return other

    def copy(self) -> "SplitState":
        return SplitState(self.spec, self.X, list(self.W), list(self.V),
                          None if self.U is None else list(self.U))

    def blocks(self) -> Iterator[tuple[Block, Matrix]]:
        for i in range(1, self.spec.N + 1):
            yield Block("W", i), self.W[i - 1]
            yield Block("V", i), self.V[i - 1]
            if self.U is not None:
                yield Block("U", i), self.U[i - 1]

    def norm_sq(self) -> float:
        return math.fsum(fro_norm_sq(M) for _, M in self.blocks())

    def diff_sq(self, other: "SplitState") -> float:
        return math.fsum(fro_norm_sq(M - other.get(b)) for b, M in self.blocks())

    def check_finite(self, where: str) -> None:
        for b, M in self.blocks():
            ensure_finite(M, f"{where} ({b})")

    def columns(self, cols: np.ndarray) -> "SplitState":
        """Restriction to a subset of samples; weights are shared."""
        X = self.X[:, cols]
        X.setflags(write=False)
        return SplitState(self.spec, X, list(self.W), [V[:, cols] for V in self.V],
                          None if self.U is None else [U[:, cols] for U in self.U])

    def merge_columns(self, cols: np.ndarray, sub: "SplitState") -> "SplitState":
        def put(full: Matrix, part: Matrix) -> Matrix:
            out = full.copy()
            out[:, cols] = part
            return out
        return SplitState(
            self.spec, self.X, list(sub.W),
            [put(F, P) for F, P in zip(self.V, sub.V)],
            None if self.U is None else [put(F, P) for F, P in zip(self.U, sub.U)],
        )


def check_form(form: Form, state: SplitState) -> None:
    if form.has_pre_activations != (state.U is not None):
        raise ShapeError(f"form {form.value} does not match a state "
                         f"{'with' if state.U is not None else 'without'} pre-activations")
    if (form is Form.RESIDUAL) != state.spec.residual:
        raise ShapeError(f"form {form.value} does not match network residual={state.spec.residual}")


# ── Initialization ─────────────────────────────────────────────────────────

class SeedStreams(NamedTuple):
    weights: np.random.SeedSequence
    batches: np.random.SeedSequence
    shuffle: np.random.SeedSequence
    data:    np.random.SeedSequence


def seed_streams(seed: int) -> SeedStreams:
    """Independent generators for every random draw of a run. BCD and SGD share the
    weights stream, so both start from the same network."""
    return SeedStreams(*np.random.SeedSequence(seed).spawn(4))


def init_weights(spec: NetworkSpec, std: float, bias_val: float, seed) -> list[Matrix]:
    """Gaussian(0, std^2) weights, bias column set to bias_val. `seed` may be an
    int, a SeedSequence or a Generator."""
    if std < 0:
        raise ValueError(f"std must be nonnegative, got {std}")
    rng = np.random.default_rng(seed)
    weights = []
    for i in range(1, spec.N + 1):
        rows, cols = spec.weight_shape(i)
        W = std * rng.standard_normal((rows, cols))
        if spec.bias:
            W[:, -1] = bias_val
        weights.append(W)
    return weights


def _check_weights(spec: NetworkSpec, weights: list[Matrix]) -> None:
    if len(weights) != spec.N:
        raise ShapeError(f"expected {spec.N} weight matrices, got {len(weights)}")
    for i, W in enumerate(weights, start=1):
        if W.shape != spec.weight_shape(i):
            raise ShapeError(f"W_{i} has shape {W.shape}, expected {spec.weight_shape(i)}")


def forward_pass(spec: NetworkSpec, weights: list[Matrix], X: Matrix) -> tuple[list[Matrix], list[Matrix]]:
    """Pure forward pass: returns (U_1..U_N, V_1..V_N)."""
    _check_weights(spec, weights)
    if X.ndim != 2 or X.shape[0] != spec.dims[0]:
        raise ShapeError(f"X must have {spec.dims[0]} rows, got shape {X.shape}")
    Us, Vs = [], []
    prev = X
    for i in range(1, spec.N + 1):
        U = matmul(weights[i - 1], aug(prev, spec.bias))
        V = activation_apply(spec.act(i), U)
        if spec.skip(i):
            V = V + prev
        Us.append(U)
        Vs.append(V)
        prev = V
    return Us, Vs


def forward_init(spec: NetworkSpec, weights: list[Matrix], X: Matrix, form: Form | None = None) -> SplitState:
    """Initial iterate from a single forward pass; every penalty term is zero."""
    if form is None:
        form = Form.RESIDUAL if spec.residual else Form.THREE_SPLIT
    Us, Vs = forward_pass(spec, weights, X)
    X = np.array(X, dtype=np.float64, copy=True)
    X.setflags(write=False)
    state = SplitState(spec, X, [np.array(W, dtype=np.float64) for W in weights], Vs,
                       Us if form.has_pre_activations else None)
    check_form(form, state)
    return state


# ── Objective ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class ObjectiveBreakdown:
    risk:    float
    w_reg:   float
    v_reg:   float
    penalty: float
    total:   float

    @classmethod
    def of(cls, risk: float, w_reg: float, v_reg: float, penalty: float) -> "ObjectiveBreakdown":
        return cls(risk, w_reg, v_reg, penalty, math.fsum([risk, w_reg, v_reg, penalty]))


def layer_residuals(form: Form, state: SplitState, i: int) -> list[Matrix]:
    """The matrices whose squared norms make up layer i's penalty."""
    spec = state.spec
    Z = matmul(state.W[i - 1], state.input_of(i))
    if form is Form.TWO_SPLIT:
        return [state.V[i - 1] - activation_apply(spec.act(i), Z)]
    U = state.U[i - 1]
    R1 = state.V[i - 1] - activation_apply(spec.act(i), U)
    if spec.skip(i):
        R1 = R1 - state.v(i - 1)
    return [R1, U - Z]


def layer_penalty(form: Form, state: SplitState, gamma: float, i: int) -> float:
    return 0.5 * gamma * math.fsum(fro_norm_sq(R) for R in layer_residuals(form, state, i))


def eval_objective(form: Form, state: SplitState, Y: Matrix, hp: Hyperparams) -> ObjectiveBreakdown:
    check_form(form, state)
    N = state.spec.N
    T = loss_targets(hp.loss, Y)
    risk = risk_value(hp.loss, state.V[-1], T)
    w_reg = math.fsum(reg_value(hp.w_reg_of(i), state.W[i - 1]) for i in range(1, N + 1))
    v_reg = math.fsum(reg_value(hp.v_reg_of(i), state.V[i - 1]) for i in range(1, N + 1))
    penalty = math.fsum(layer_penalty(form, state, hp.gamma, i) for i in range(1, N + 1))
    return ObjectiveBreakdown.of(risk, w_reg, v_reg, penalty)


def block_layers(block: Block, N: int) -> list[int]:
    """Layers whose penalty terms depend on the block."""
    if block.kind == "V" and block.layer < N:
        return [block.layer, block.layer + 1]
    return [block.layer]


def block_smooth_value(form: Form, state: SplitState, T: Matrix, hp: Hyperparams, block: Block) -> float:
    """Penalty terms touching the block, plus the risk for V_N."""
    N = state.spec.N
    val = math.fsum(layer_penalty(form, state, hp.gamma, j) for j in block_layers(block, N))
    if block == Block("V", N):
        val += risk_value(hp.loss, state.V[-1], T)
    return val


def penalty_grad(form: Form, state: SplitState, gamma: float, block: Block) -> Matrix:
    """Gradient of the coupling penalty in one block. Nonsmooth activations use
    the selection of activation_derivative (0 at the ReLU kink)."""
    spec = state.spec
    N = spec.N
    i = block.layer
    if form is Form.TWO_SPLIT:
        if block.kind == "W":
            A = state.input_of(i)
            Z = matmul(state.W[i - 1], A)
            R = state.V[i - 1] - activation_apply(spec.act(i), Z)
            return -gamma * matmul(R * activation_derivative(spec.act(i), Z), A.T)
        if block.kind == "V":
            Z = matmul(state.W[i - 1], state.input_of(i))
            G = gamma * (state.V[i - 1] - activation_apply(spec.act(i), Z))
            if i < N:
                Zn = matmul(state.W[i], state.input_of(i + 1))
                Rn = state.V[i] - activation_apply(spec.act(i + 1), Zn)
                Wt, _ = split_weight(state.W[i], spec.bias)
                G = G - gamma * matmul(Wt.T, Rn * activation_derivative(spec.act(i + 1), Zn))
            return G
        raise ShapeError("two-splitting has no U blocks")

    R1, R2 = layer_residuals(form, state, i)
    if block.kind == "W":
        return -gamma * matmul(R2, state.input_of(i).T)
    if block.kind == "U":
        return -gamma * activation_derivative(spec.act(i), state.U[i - 1]) * R1 + gamma * R2
    G = gamma * R1
    if i < N:
        R1n, R2n = layer_residuals(form, state, i + 1)
        Wt, _ = split_weight(state.W[i], spec.bias)
        G = G - gamma * matmul(Wt.T, R2n)
        if spec.skip(i + 1):
            G = G - gamma * R1n
    return G


# ── Schedule ───────────────────────────────────────────────────────────────

def block_schedule(form: Form, N: int, order: UpdateOrder) -> list[Block]:
    """Gauss-Seidel sweep: per layer V, then U (split forms with U), then W."""
    kinds = ("V", "U", "W") if form.has_pre_activations else ("V", "W")
    return [Block(k, i) for i in order.sequence(N) for k in kinds]


def block_alpha(form: Form, block: Block, N: int, alpha: float) -> float:
    """Proximal weight of a block update; 0 for the plain minimizations."""
    if form is Form.TWO_SPLIT:
        return alpha
    if block.kind == "V" and block.layer < N:
        return 0.0
    if block.kind == "U" and block.layer == N:
        return 0.0
    return alpha


# ── Prediction ─────────────────────────────────────────────────────────────

def predict(spec: NetworkSpec, weights: list[Matrix], X: Matrix) -> Matrix:
    return forward_pass(spec, weights, X)[1][-1]


def predict_accuracy(spec: NetworkSpec, weights: list[Matrix], X: Matrix, labels) -> float:
    labels = np.asarray(labels)
    if labels.shape != (X.shape[1],):
        raise ShapeError(f"labels length {labels.shape} does not match {X.shape[1]} columns")
    if labels.size == 0:
        return 0.0
    # np.argmax returns the first maximal row on ties
    pred = np.argmax(predict(spec, weights, X), axis=0)
    return float(np.mean(pred == labels))
