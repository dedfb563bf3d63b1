from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from conftest import toy_spec

from bcdtrain.errors import ShapeError, UnsupportedError
from bcdtrain.operators import IDENTITY, ActKind, Activation, LossKind, Regularizer, RegKind
from bcdtrain.oracles import finite_difference_grad
from bcdtrain.state import (
    Block,
    Form,
    Hyperparams,
    NetworkSpec,
    ObjectiveBreakdown,
    SplitState,
    UpdateOrder,
    VnStrategy,
    block_alpha,
    block_schedule,
    eval_objective,
    forward_init,
    init_weights,
    layer_penalty,
    penalty_grad,
    predict_accuracy,
    seed_streams,
)

RELU = Activation(ActKind.RELU)


# ── Network ────────────────────────────────────────────────────────────────

def test_network_spec_validation():
    with pytest.raises(ShapeError):
        NetworkSpec((3, 2), (RELU,))
    with pytest.raises(ShapeError):
        NetworkSpec((3, 4, 2), (RELU, IDENTITY), residual=True)
    with pytest.raises(ShapeError):
        NetworkSpec((3, 2), (IDENTITY, IDENTITY))


def test_residual_skips_follow_shapes():
    spec = NetworkSpec.mlp((4, 4, 4, 3), RELU, residual=True)
    assert spec.skips == (1.0, 1.0, 0.0)
    square_out = NetworkSpec.mlp((4, 4, 4), RELU, residual=True)
    assert square_out.skips == (1.0, 1.0)
    assert NetworkSpec.mlp((4, 4, 4), RELU).skips == (0.0, 0.0)


def test_weight_shape_includes_bias_column():
    spec = NetworkSpec.mlp((5, 3, 2), RELU, bias=True)
    assert spec.weight_shape(1) == (3, 6)
    assert spec.weight_shape(2) == (2, 4)


# ── Initialization ─────────────────────────────────────────────────────────

def test_init_weights_statistics():
    spec = NetworkSpec((1000, 1000), (IDENTITY,))
    W = init_weights(spec, 0.01, 0.1, seed=0)[0]
    assert abs(W.mean()) <= 3 * 0.01 / 1000
    assert W.std() == pytest.approx(0.01, rel=0.02)


def test_init_weights_deterministic_and_degenerate():
    spec = NetworkSpec.mlp((3, 4, 2), RELU, bias=True)
    a = init_weights(spec, 0.01, 0.1, seed=9)
    b = init_weights(spec, 0.01, 0.1, seed=9)
    for Wa, Wb in zip(a, b):
        np.testing.assert_array_equal(Wa, Wb)
    for W in init_weights(spec, 0.0, 0.1, seed=9):
        assert np.all(W[:, :-1] == 0.0)
        assert np.all(W[:, -1] == 0.1)


def test_seed_streams_are_independent_and_reproducible():
    s1, s2 = seed_streams(4), seed_streams(4)
    draws = [np.random.default_rng(s).standard_normal(3) for s in s1]
    again = [np.random.default_rng(s).standard_normal(3) for s in s2]
    for x, y in zip(draws, again):
        np.testing.assert_array_equal(x, y)
    assert not np.array_equal(draws[0], draws[1])


def test_forward_init_zero_propagation():
    spec = NetworkSpec.mlp((3, 4, 2), IDENTITY)
    weights = [np.zeros(spec.weight_shape(i)) for i in (1, 2)]
    state = forward_init(spec, weights, np.ones((3, 5)))
    for M in state.U + state.V:
        assert np.all(M == 0.0)


def test_forward_init_hand_pass():
    spec = NetworkSpec.mlp((1, 1, 1), RELU)
    state = forward_init(spec, [np.array([[2.0]]), np.array([[1.0]])], np.array([[3.0]]))
    assert state.U[0][0, 0] == 6.0
    assert state.V[0][0, 0] == 6.0
    assert state.V[1][0, 0] == 6.0
    with pytest.raises(ValueError):
        state.X[0, 0] = 1.0


def test_forward_init_rejects_wrong_input():
    spec = NetworkSpec.mlp((3, 2), RELU)
    with pytest.raises(ShapeError):
        forward_init(spec, [np.zeros((2, 3))], np.zeros((4, 1)))


# ── Objective ──────────────────────────────────────────────────────────────

def test_eval_objective_hand_example():
    spec = NetworkSpec((1, 1), (IDENTITY,))
    state = SplitState(spec, np.array([[1.0]]), [np.array([[1.0]])], [np.array([[0.0]])], [np.array([[1.0]])])
    obj = eval_objective(Form.THREE_SPLIT, state, np.array([[0.0]]), Hyperparams(gamma=2.0))
    assert obj.risk == 0.0
    assert obj.penalty == 1.0
    assert obj.total == 1.0


@pytest.mark.parametrize("form", list(Form))
def test_forward_state_has_zero_penalty(form, rng, toy_data):
    spec = toy_spec(form, "tanh", bias=True)
    state = forward_init(spec, init_weights(spec, 0.5, 0.1, seed=1), toy_data.X, form)
    obj = eval_objective(form, state, toy_data.Y, Hyperparams())
    assert obj.penalty == pytest.approx(0.0, abs=1e-24)
    assert obj.total == obj.risk
    assert obj.total >= 0.0


def test_eval_objective_rejects_mismatched_form(toy_data):
    spec = toy_spec(Form.THREE_SPLIT)
    state = forward_init(spec, init_weights(spec, 0.1, 0.0, seed=1), toy_data.X, Form.TWO_SPLIT)
    with pytest.raises(ShapeError):
        eval_objective(Form.THREE_SPLIT, state, toy_data.Y, Hyperparams())


def _perturbed_state(form, spec, X, rng):
    state = forward_init(spec, init_weights(spec, 0.5, 0.1, seed=2), X, form)
    state.V = [V + 0.3 * rng.standard_normal(V.shape) for V in state.V]
    if state.U is not None:
        state.U = [U + 0.3 * rng.standard_normal(U.shape) for U in state.U]
    return state


@pytest.mark.parametrize("form", list(Form))
def test_penalty_grad_matches_finite_differences(form, rng, toy_data):
    spec = toy_spec(form, "tanh", bias=True)
    state = _perturbed_state(form, spec, toy_data.X, rng)
    gamma = 1.5
    for block, value in state.blocks():
        def f(M, block=block):
            moved = state.with_block(block, M)
            return sum(layer_penalty(form, moved, gamma, j) for j in range(1, spec.N + 1))
        fd = finite_difference_grad(f, value)
        np.testing.assert_allclose(penalty_grad(form, state, gamma, block), fd, rtol=1e-5, atol=1e-7,
                                   err_msg=str(block))


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(list(Form)), st.permutations([1, 2, 3]), st.integers(0, 2**32 - 1))
def test_objective_does_not_depend_on_layer_order(form, order, seed):
    rng = np.random.default_rng(seed)
    spec = toy_spec(form, "tanh", bias=True)
    state = _perturbed_state(form, spec, rng.uniform(0.0, 1.0, (4, 8)), rng)
    Y = np.eye(3)[:, rng.integers(0, 3, 8)]
    hp = Hyperparams(gamma=0.7, w_reg=(Regularizer(RegKind.FRO, lam=0.05),))
    obj = eval_objective(form, state, Y, hp)
    shuffled = math.fsum(layer_penalty(form, state, hp.gamma, i) for i in order)
    assert obj.penalty == shuffled
    assert obj.total == ObjectiveBreakdown.of(obj.risk, obj.w_reg, obj.v_reg, shuffled).total


# ── Schedule and hyperparameters ───────────────────────────────────────────

def test_block_schedule_orders():
    assert [str(b) for b in block_schedule(Form.THREE_SPLIT, 2, UpdateOrder())] == ["V2", "U2", "W2", "V1", "U1", "W1"]
    assert [str(b) for b in block_schedule(Form.TWO_SPLIT, 2, UpdateOrder.parse("forward"))] == ["V1", "W1", "V2", "W2"]
    assert [b.layer for b in block_schedule(Form.RESIDUAL, 3, UpdateOrder.parse("custom:2,3,1"))][::3] == [2, 3, 1]


def test_block_alpha_marks_plain_minimizations():
    N = 3
    assert block_alpha(Form.THREE_SPLIT, Block("V", 1), N, 1.0) == 0.0
    assert block_alpha(Form.THREE_SPLIT, Block("U", 3), N, 1.0) == 0.0
    assert block_alpha(Form.THREE_SPLIT, Block("V", 3), N, 1.0) == 1.0
    assert block_alpha(Form.RESIDUAL, Block("U", 1), N, 1.0) == 1.0
    assert block_alpha(Form.TWO_SPLIT, Block("V", 1), N, 0.5) == 0.5


def test_update_order_validation():
    assert str(UpdateOrder.parse("custom:2,1")) == "custom:2,1"
    with pytest.raises(ValueError):
        UpdateOrder.parse("custom:1,1").sequence(2)
    with pytest.raises(ValueError):
        UpdateOrder.parse("backward:1")


def test_hyperparams_strategy_resolution():
    assert Hyperparams(loss=LossKind.CROSS_ENTROPY).vn_strategy is VnStrategy.PROX_LINEAR
    assert Hyperparams().vn_strategy is VnStrategy.EXACT
    with pytest.raises(UnsupportedError):
        Hyperparams(loss=LossKind.CROSS_ENTROPY, vn_strategy=VnStrategy.EXACT)
    with pytest.raises(UnsupportedError):
        Hyperparams(loss=LossKind.HINGE, vn_strategy=VnStrategy.PROX_LINEAR)
    with pytest.raises(ValueError):
        Hyperparams(alpha=0.0)


def test_hyperparams_per_layer_regularizers():
    hp = Hyperparams(w_reg=(Regularizer(), Regularizer(RegKind.FRO, lam=0.1)))
    assert hp.w_reg_of(2).kind is RegKind.FRO
    assert hp.v_reg_of(5).kind is RegKind.NONE
    with pytest.raises(ShapeError):
        hp.check_layers(3)


# ── Prediction ─────────────────────────────────────────────────────────────

def test_predict_accuracy_perfect_and_ties():
    spec = NetworkSpec((3, 3), (IDENTITY,))
    labels = np.array([0, 2, 1, 2])
    X = np.eye(3)[:, labels]
    assert predict_accuracy(spec, [np.eye(3)], X, labels) == 1.0
    assert predict_accuracy(spec, [np.zeros((3, 3))], X, labels) == 0.25


def test_columns_and_merge(toy_data):
    spec = toy_spec(Form.THREE_SPLIT)
    state = forward_init(spec, init_weights(spec, 0.3, 0.0, seed=1), toy_data.X)
    cols = np.array([1, 4, 7])
    sub = state.columns(cols)
    assert sub.n == 3
    sub.V = [V + 1.0 for V in sub.V]
    merged = state.merge_columns(cols, sub)
    np.testing.assert_array_equal(merged.V[0][:, cols], state.V[0][:, cols] + 1.0)
    np.testing.assert_array_equal(np.delete(merged.V[0], cols, axis=1), np.delete(state.V[0], cols, axis=1))
