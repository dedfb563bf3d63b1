"""
solver.py — block updates and the BCD sweeps for the two-split, three-split and
residual formulations.

Every block is either solved in closed form (linear systems via Cholesky, scalar
proximal maps) or, when no closed form exists, by a proximal-gradient inner loop
that never returns a point worse than the block's previous value.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from bcdtrain.diagnostics import (
    UNSET,
    TraceRecord,
    activation_bound_lipschitz,
    bbar_constant,
    descent_certified,
    descent_check,
    iterate_bound,
    monotone_check,
    residual_checkable,
    subgrad_residual,
    sufficient_descent_constant,
)
from bcdtrain.errors import DescentViolation, UnsupportedError
from bcdtrain.linalg import Matrix, fro_norm_sq, matmul, op_norm_sq, solve_spd
from bcdtrain.operators import (
    IDENTITY,
    LossKind,
    RegKind,
    Regularizer,
    activation_apply,
    activation_prox,
    hinge_prox,
    loss_targets,
    project,
    reg_quad_argmin,
    reg_value,
    risk_gradient,
)
from bcdtrain.state import (
    Block,
    Form,
    Hyperparams,
    NetworkSpec,
    ObjectiveBreakdown,
    SplitState,
    aug,
    block_alpha,
    block_schedule,
    block_smooth_value,
    check_form,
    eval_objective,
    forward_init,
    init_weights,
    penalty_grad,
    predict_accuracy,
    seed_streams,
    split_weight,
)

logger = logging.getLogger(__name__)

MAX_BACKTRACK = 60


@dataclass
class EpochResult:
    state:        SplitState
    delta_sq:     float
    objective:    ObjectiveBreakdown
    block_totals: list[tuple[Block, float, float]] | None = None
    exact:        bool = True


# ── Output layer ───────────────────────────────────────────────────────────

def _output_center(form: Form, state: SplitState) -> Matrix:
    """What V_N is pulled towards by the output-layer penalty."""
    N = state.spec.N
    if form is Form.TWO_SPLIT:
        return matmul(state.W[-1], state.input_of(N))
    c = state.U[-1]
    if state.spec.skip(N):
        c = c + state.v(N - 1)
    return c


def update_output_v(form: Form, state: SplitState, T: Matrix, hp: Hyperparams) -> Matrix:
    N = state.spec.N
    s = hp.v_reg_of(N)
    V_old = state.V[-1]
    n = state.n
    g, a = hp.gamma, hp.alpha
    c = _output_center(form, state)

    if hp.prox_linear:
        C = (g * c + a * V_old - risk_gradient(hp.loss, V_old, T)) / (g + a)
        return reg_quad_argmin(s, C, g + a)

    if hp.loss is LossKind.SQUARED:
        rho = 1.0 / n + g + a
        return reg_quad_argmin(s, (T / n + g * c + a * V_old) / rho, rho)

    # Hinge: (1/n) max(0, 1 - t v) + (g+a)/2 (v - b)^2 + lam v^2 per entry.
    # Completing the square gives weight rho = g + a + 2 lam around (g c + a v_old)/rho;
    # multiplying through by n puts it in hinge_prox form with quadratic weight n rho.
    if s.kind in (RegKind.L1, RegKind.ELASTIC):
        raise UnsupportedError(f"hinge loss with output regularizer {s} has no exact update")
    rho = g + a + 2.0 * s.fro_weight
    V = hinge_prox(T, (g * c + a * V_old) / rho, n * rho)
    return project(s, np.asarray(V, dtype=np.float64))


def update_output_u(form: Form, state: SplitState) -> Matrix:
    """Midpoint of the two equal-weight quadratics in U_N."""
    N = state.spec.N
    target = state.V[-1] - state.v(N - 1) if state.spec.skip(N) else state.V[-1]
    return 0.5 * (target + matmul(state.W[-1], state.input_of(N)))


def update_output_block(form: Form, state: SplitState, Y: Matrix, hp: Hyperparams) -> tuple[Matrix, Matrix | None]:
    """New V_N and, for the forms with pre-activations, the U_N that follows it."""
    check_form(form, state)
    T = loss_targets(hp.loss, Y)
    V = update_output_v(form, state, T, hp)
    if not form.has_pre_activations:
        return V, None
    return V, update_output_u(form, state.with_block(Block("V", state.spec.N), V))


# ── Hidden blocks ──────────────────────────────────────────────────────────

def update_W_block(form: Form, state: SplitState, T: Matrix, hp: Hyperparams, i: int) -> Matrix:
    r = hp.w_reg_of(i)
    act = state.spec.act(i)
    if r.quadratic and (form.has_pre_activations or act == IDENTITY):
        A = state.input_of(i)
        target = state.U[i - 1] if form.has_pre_activations else state.V[i - 1]
        G = hp.gamma * matmul(A, A.T)
        G = 0.5 * (G + G.T)
        G[np.diag_indices_from(G)] += hp.alpha + 2.0 * r.fro_weight
        rhs = hp.gamma * matmul(target, A.T) + hp.alpha * state.W[i - 1]
        return solve_spd(G, np.ascontiguousarray(rhs.T)).T
    return _inner_solve(form, state, T, hp, Block("W", i), r, hp.alpha)


def update_V_block(form: Form, state: SplitState, T: Matrix, hp: Hyperparams, i: int) -> Matrix:
    spec = state.spec
    s = hp.v_reg_of(i)
    Wt, wb = split_weight(state.W[i], spec.bias)
    g = hp.gamma

    if form is Form.TWO_SPLIT:
        if s.quadratic and spec.act(i + 1) == IDENTITY:
            nxt = state.V[i] if wb is None else state.V[i] - wb
            G = g * matmul(Wt.T, Wt)
            G = 0.5 * (G + G.T)
            G[np.diag_indices_from(G)] += g + hp.alpha + 2.0 * s.fro_weight
            own = activation_apply(spec.act(i), matmul(state.W[i - 1], state.input_of(i)))
            rhs = g * own + hp.alpha * state.V[i - 1] + g * matmul(Wt.T, nxt)
            return solve_spd(G, rhs)
        return _inner_solve(form, state, T, hp, Block("V", i), s, hp.alpha)

    if not s.quadratic:
        return _inner_solve(form, state, T, hp, Block("V", i), s, 0.0)

    skip_in, skip_out = spec.skip(i), spec.skip(i + 1)
    U_next = state.U[i] if wb is None else state.U[i] - wb
    G = g * matmul(Wt.T, Wt)
    G = 0.5 * (G + G.T)
    G[np.diag_indices_from(G)] += g * (1.0 + skip_out) + 2.0 * s.fro_weight
    rhs = g * activation_apply(spec.act(i), state.U[i - 1]) + g * matmul(Wt.T, U_next)
    if skip_in:
        rhs = rhs + g * state.v(i - 1)
    if skip_out:
        rhs = rhs + g * (state.V[i] - activation_apply(spec.act(i + 1), state.U[i]))
    return solve_spd(G, rhs)


def _scalar_u_objective(act, u, a, b, ge):
    return 0.5 * (activation_apply(act, u) - a) ** 2 + 0.5 * ge * (u - b) ** 2


def _u_update(form: Form, state: SplitState, hp: Hyperparams, i: int) -> tuple[Matrix, bool]:
    """Entrywise min g/2 (v - sigma(u))^2 + g/2 (u - c)^2 + alpha/2 (u - u_old)^2.

    Folding the two quadratics gives centre (g c + alpha u_old)/(g + alpha); dividing
    by g leaves 1/2 (sigma(u) - v)^2 + g'/2 (u - centre)^2 with g' = (g + alpha)/g.
    Returns the new U and whether every entry is the scalar minimizer (False when a
    smooth-activation entry fell back to its old value).
    """
    if not form.has_pre_activations:
        raise UnsupportedError("two-splitting has no U blocks")
    spec = state.spec
    act = spec.act(i)
    g, al = hp.gamma, hp.alpha
    U_old = state.U[i - 1]
    v = state.V[i - 1] - state.v(i - 1) if spec.skip(i) else state.V[i - 1]
    c = matmul(state.W[i - 1], state.input_of(i))
    b = (g * c + al * U_old) / (g + al)
    ge = (g + al) / g
    U = np.asarray(activation_prox(act, v, b, ge), dtype=np.float64)
    if not act.smooth:
        return U, True
    f_old = _scalar_u_objective(act, U_old, v, b, ge)
    f_new = _scalar_u_objective(act, U, v, b, ge)
    keep_old = f_old < f_new
    # ties at rounding level leave the old entry a minimizer
    rejected = keep_old & (f_new - f_old > 1e-12 * (1.0 + np.abs(f_new)))
    if np.any(rejected):
        logger.warning(f"[solver] U{i}: {int(np.count_nonzero(rejected))} entries kept their old value")
    return np.where(keep_old, U_old, U), not bool(np.any(rejected))


def update_U_block(form: Form, state: SplitState, hp: Hyperparams, i: int) -> Matrix:
    return _u_update(form, state, hp, i)[0]


def update_block(form: Form, state: SplitState, T: Matrix, hp: Hyperparams, block: Block) -> Matrix:
    N = state.spec.N
    if block.kind == "W":
        return update_W_block(form, state, T, hp, block.layer)
    if block.layer == N:
        if block.kind == "V":
            return update_output_v(form, state, T, hp)
        return update_output_u(form, state)
    if block.kind == "V":
        return update_V_block(form, state, T, hp, block.layer)
    return update_U_block(form, state, hp, block.layer)


# ── Inner solver ───────────────────────────────────────────────────────────

def _lipschitz_estimate(state: SplitState, hp: Hyperparams, block: Block, alpha_b: float) -> float:
    spec = state.spec
    if block.kind == "W":
        L = hp.gamma * op_norm_sq(state.input_of(block.layer))
    elif block.kind == "V" and block.layer < spec.N:
        Wt, _ = split_weight(state.W[block.layer], spec.bias)
        L = hp.gamma * (1.0 + spec.skip(block.layer + 1) + op_norm_sq(Wt))
    else:
        L = hp.gamma
    return max(L + alpha_b, 1e-12)


def _inner_solve(form: Form, state: SplitState, T: Matrix, hp: Hyperparams,
                 block: Block, reg: Regularizer, alpha_b: float) -> Matrix:
    """Proximal gradient with backtracking on reg(X) + S(.., X, ..) + alpha_b/2 ||X - X_old||^2.

    Starts from the previous block value, so the returned point is never worse
    than it; a final comparison rejects anything that is.
    """
    old = state.get(block)

    def smooth(X: Matrix) -> float:
        val = block_smooth_value(form, state.with_block(block, X), T, hp, block)
        return val + 0.5 * alpha_b * fro_norm_sq(X - old)

    def grad(X: Matrix) -> Matrix:
        return penalty_grad(form, state.with_block(block, X), hp.gamma, block) + alpha_b * (X - old)

    start = smooth(old) + reg_value(reg, old)
    X = project(reg, old)
    f = smooth(X)
    F = f + reg_value(reg, X)
    t = 1.0 / _lipschitz_estimate(state, hp, block, alpha_b)

    for _ in range(hp.inner_iters):
        G = grad(X)
        for _ in range(MAX_BACKTRACK):
            Xn = np.asarray(reg_quad_argmin(reg, X - t * G, 1.0 / t))
            D = Xn - X
            fn = smooth(Xn)
            model = f + float(np.vdot(G, D)) + fro_norm_sq(D) / (2.0 * t)
            if fn <= model + 1e-15 * (1.0 + abs(f)):
                break
            t *= 0.5
        Fn = fn + reg_value(reg, Xn)
        if not Fn <= F:
            break
        decrease = F - Fn
        X, f, F = Xn, fn, Fn
        if decrease <= hp.inner_tol * (1.0 + abs(F)):
            break

    if F > start:
        logger.warning(f"[solver] {block}: inner solve rejected ({F:.6e} > {start:.6e})")
        return old
    return X


# ── Sweeps ─────────────────────────────────────────────────────────────────

def run_epoch(form: Form, state: SplitState, Y: Matrix, hp: Hyperparams, *,
              track_blocks: bool = False) -> EpochResult:
    """One Gauss-Seidel sweep in hp.update_order; each block sees the freshest values."""
    check_form(form, state)
    T = loss_targets(hp.loss, Y)
    cur = state.copy()
    tracked = [] if track_blocks else None
    debug = logger.isEnabledFor(logging.DEBUG)
    N = state.spec.N
    exact = True

    for block in block_schedule(form, N, hp.update_order):
        before = cur.get(block)
        if block.kind == "U" and block.layer < N:
            value, block_exact = _u_update(form, cur, hp, block.layer)
            exact &= block_exact
        else:
            value = update_block(form, cur, T, hp, block)
        value = np.ascontiguousarray(value, dtype=np.float64)
        cur.set(block, value)
        if tracked is not None:
            tracked.append((block, eval_objective(form, cur, Y, hp).total, fro_norm_sq(value - before)))
        if debug:
            logger.debug(f"[epoch] {block} |d|^2={fro_norm_sq(value - before):.3e}")

    cur.check_finite("run_epoch")
    return EpochResult(cur, cur.diff_sq(state), eval_objective(form, cur, Y, hp), tracked, exact)


def feasible_start(form: Form, spec: NetworkSpec, weights: list[Matrix], X: Matrix, hp: Hyperparams) -> SplitState:
    """Forward-pass initialization projected onto the regularizers' domains."""
    weights = [project(hp.w_reg_of(i), W) for i, W in enumerate(weights, start=1)]
    state = forward_init(spec, weights, X, form)
    if not any(hp.v_reg_of(i).is_indicator for i in range(1, spec.N + 1)):
        return state
    prev = state.X
    for i in range(1, spec.N + 1):
        U = matmul(state.W[i - 1], aug(prev, spec.bias))
        V = activation_apply(spec.act(i), U)
        if spec.skip(i):
            V = V + prev
        V = project(hp.v_reg_of(i), V)
        if state.U is not None:
            state.U[i - 1] = U
        state.V[i - 1] = V
        prev = V
    return state


def _locate_violation(form: Form, prev: SplitState, Y: Matrix, hp: Hyperparams,
                      prev_total: float, a: float, certified: bool) -> str:
    """Replay the sweep block by block and name the first block that broke the bound."""
    replay = run_epoch(form, prev, Y, hp, track_blocks=True)
    before = prev_total
    for block, total, d in replay.block_totals:
        ok = descent_check(before, total, d, a).passed if certified else monotone_check(before, total).passed
        if not ok:
            return str(block)
        before = total
    return "sweep"


def run_training(form: Form, spec: NetworkSpec, data, hp: Hyperparams, epochs: int, *,
                 init_std: float = 0.01, init_bias: float = 0.1, test=None,
                 enforce: bool = True) -> list[TraceRecord]:
    """init_weights -> forward pass -> epochs x (sweep + diagnostics).

    `data` and `test` are datasets with X, Y and labels. The bbar bounds in the
    returned trace use the largest iterate norm seen over the whole run.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    hp.check_layers(spec.N)
    hp.check_prox_linear(data.X.shape[1], spec.dims[-1])

    X, Y = data.X, data.Y
    n = X.shape[1]
    streams = seed_streams(hp.seed)
    batch_rng = np.random.default_rng(streams.batches)
    subsample = hp.batch_size is not None and hp.batch_size < n
    certified = descent_certified(form, hp, spec.N) and not subsample
    checkable = residual_checkable(form, hp, spec.N)
    L_R = hp.risk_lipschitz(n, spec.dims[-1])
    a = sufficient_descent_constant(hp, L_R)

    state = feasible_start(form, spec, init_weights(spec, init_std, init_bias, streams.weights), X, hp)
    obj = eval_objective(form, state, Y, hp)
    B = iterate_bound(state)

    def accuracies(st: SplitState) -> tuple[float, float]:
        train = predict_accuracy(spec, st.W, X, data.labels)
        held = predict_accuracy(spec, st.W, test.X, test.labels) if test is not None else UNSET
        return train, held

    started = time.perf_counter()
    trace = [TraceRecord(0, obj, 0.0, 0.0, UNSET, *accuracies(state), 0.0)]
    logger.info(f"[bcd] {form.value} | N={spec.N} | n={n} | total0={obj.total:.6e} | a={a:g} | certified={certified}")

    for epoch in range(1, epochs + 1):
        prev, prev_obj = state, obj
        if subsample:
            cols = np.sort(batch_rng.choice(n, size=hp.batch_size, replace=False))
            sub = run_epoch(form, state.columns(cols), Y[:, cols], hp)
            state = state.merge_columns(cols, sub.state)
            obj = eval_objective(form, state, Y, hp)
            delta = state.diff_sq(prev)
            residual = UNSET
        else:
            result = run_epoch(form, state, Y, hp)
            state, obj, delta = result.state, result.objective, result.delta_sq
            residual = subgrad_residual(form, prev, state, Y, hp) if checkable and result.exact else UNSET

        B = max(B, iterate_bound(state))
        train_acc, test_acc = accuracies(state)
        trace.append(TraceRecord(epoch, obj, delta, residual, UNSET, train_acc, test_acc,
                                 time.perf_counter() - started))
        logger.info(
            f"[bcd] epoch {epoch:>4} | total={obj.total:.6e} | d2={delta:.3e} | "
            f"res={residual:.3e} | train={train_acc:.4f} | test={test_acc:.4f}"
        )

        if enforce and not subsample:
            mono = monotone_check(prev_obj.total, obj.total)
            desc = descent_check(prev_obj.total, obj.total, delta, a)
            if not mono.passed or (certified and not desc.passed):
                block = _locate_violation(form, prev, Y, hp, prev_obj.total, a, certified)
                report = (
                    f"total {prev_obj.total:.17g} -> {obj.total:.17g}, "
                    f"a*delta_sq = {a * delta:.6e}, slack = {desc.slack:.6e}"
                )
                logger.error(f"[bcd] descent violated at epoch {epoch}, block {block}: {report}")
                raise DescentViolation(epoch, block, report)

    bbar = bbar_constant(B, activation_bound_lipschitz(state, B), hp.gamma, hp.alpha, spec.N,
                         L_R, hp.prox_linear, form is Form.RESIDUAL)
    return [
        r if r.epoch == 0 or r.residual_norm == UNSET else replace(r, bbar_bound=bbar * math.sqrt(r.delta_sq))
        for r in trace
    ]
