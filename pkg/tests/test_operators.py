from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from bcdtrain.errors import UnsupportedError
from bcdtrain.operators import (
    ActKind,
    Activation,
    LossKind,
    RegKind,
    Regularizer,
    activation_apply,
    activation_derivative,
    activation_local_lipschitz,
    activation_prox,
    hinge_prox,
    leaky_relu_quad_prox,
    loss_targets,
    reg_quad_argmin,
    reg_value,
    relu_quad_prox,
    risk_grad_lipschitz,
    risk_gradient,
    risk_value,
    smooth_scalar_quad_min,
)
from bcdtrain.oracles import (
    finite_difference_grad,
    hinge_objective,
    hinge_oracle,
    leaky_objective,
    relu_objective,
    relu_oracle,
    smooth_objective,
    smooth_oracle,
)

RELU = Activation(ActKind.RELU)
SIGMOID = Activation(ActKind.SIGMOID)
TANH = Activation(ActKind.TANH)

finite = dict(allow_nan=False, allow_infinity=False)


# ── Activations ────────────────────────────────────────────────────────────

def test_activation_examples():
    np.testing.assert_array_equal(activation_apply(RELU, np.array([[-1.0, 0.0, 2.0]])), [[0.0, 0.0, 2.0]])
    np.testing.assert_array_equal(activation_apply(SIGMOID, np.array([[0.0]])), [[0.5]])
    leaky = Activation.parse("leaky_relu:0.1")
    np.testing.assert_allclose(activation_apply(leaky, np.array([[-3.0, 3.0]])), [[-0.3, 3.0]])


def test_derivative_selection_at_kink():
    assert activation_derivative(RELU, np.array([0.0]))[0] == 0.0
    assert activation_derivative(Activation.parse("leaky_relu:0.2"), np.array([0.0]))[0] == 0.2


@pytest.mark.parametrize("act", [SIGMOID, TANH, Activation(ActKind.IDENTITY)])
def test_derivative_matches_finite_differences(act, rng):
    U = rng.standard_normal((3, 4))
    fd = (activation_apply(act, U + 1e-6) - activation_apply(act, U - 1e-6)) / 2e-6
    np.testing.assert_allclose(activation_derivative(act, U), fd, rtol=1e-6, atol=1e-9)


def test_local_lipschitz():
    assert activation_local_lipschitz(RELU, 3.0) == 1.0
    assert activation_local_lipschitz(SIGMOID, 10.0) == 0.25
    assert activation_local_lipschitz(TANH, 10.0) == 1.0
    with pytest.raises(ValueError):
        activation_local_lipschitz(RELU, 0.0)


def test_parse_round_trips_through_str():
    for text in ("relu", "identity", "sigmoid", "tanh", "leaky_relu:0.25"):
        assert str(Activation.parse(text)) == text
    assert Activation.parse("leaky_relu").slope == 0.01
    for text in ("none", "fro:0.5", "l1:2.0", "elastic:0.1:0.2", "nonneg", "box:-1.0:1.0"):
        assert str(Regularizer.parse(text)) == text
    with pytest.raises(ValueError):
        Regularizer.parse("box:1")
    with pytest.raises(ValueError):
        Activation.parse("leaky_relu:1.5")


# ── Losses ─────────────────────────────────────────────────────────────────

def test_risk_examples():
    Y = np.array([[1.0], [0.0]])
    assert risk_value(LossKind.SQUARED, Y, Y) == 0.0
    assert risk_value(LossKind.SQUARED, np.array([[1.0], [0.0]]), np.zeros((2, 1))) == 0.5
    assert risk_value(LossKind.HINGE, np.array([[2.0]]), np.array([[1.0]])) == 0.0


def test_hinge_targets_are_signed():
    np.testing.assert_array_equal(loss_targets(LossKind.HINGE, np.array([[1.0, 0.0]])), [[1.0, -1.0]])
    Y = np.array([[1.0, 0.0]])
    assert loss_targets(LossKind.SQUARED, Y) is Y


def test_risk_gradient_examples():
    Y = np.array([[0.3, 0.7]])
    np.testing.assert_array_equal(risk_gradient(LossKind.SQUARED, Y, Y), np.zeros_like(Y))
    np.testing.assert_allclose(risk_gradient(LossKind.SQUARED, np.array([[2.0]]), np.array([[0.0]])), [[2.0]])
    with pytest.raises(UnsupportedError):
        risk_gradient(LossKind.HINGE, Y, Y)


@pytest.mark.parametrize("loss", [LossKind.SQUARED, LossKind.CROSS_ENTROPY])
def test_risk_gradient_matches_finite_differences(loss, rng):
    V = rng.standard_normal((3, 4))
    Y = (rng.uniform(size=(3, 4)) > 0.5).astype(float)
    fd = finite_difference_grad(lambda A: risk_value(loss, A, Y), V)
    np.testing.assert_allclose(risk_gradient(loss, V, Y), fd, rtol=1e-5, atol=1e-9)


def test_cross_entropy_value_is_stable():
    V = np.array([[800.0, -800.0]])
    Y = np.array([[1.0, 0.0]])
    assert math.isfinite(risk_value(LossKind.CROSS_ENTROPY, V, Y))
    np.testing.assert_allclose(risk_gradient(LossKind.CROSS_ENTROPY, V, Y), [[0.0, 0.0]], atol=1e-300)


def test_risk_grad_lipschitz(rng):
    assert risk_grad_lipschitz(LossKind.SQUARED, 1) == 1.0
    assert risk_grad_lipschitz(LossKind.SQUARED, 10) == pytest.approx(0.1)
    with pytest.raises(UnsupportedError):
        risk_grad_lipschitz(LossKind.HINGE, 4)

    L = risk_grad_lipschitz(LossKind.CROSS_ENTROPY, 4, 10)
    Y = (rng.uniform(size=(10, 4)) > 0.5).astype(float)
    for _ in range(1000):
        A = 3.0 * rng.standard_normal((10, 4))
        B = 3.0 * rng.standard_normal((10, 4))
        gap = np.linalg.norm(risk_gradient(LossKind.CROSS_ENTROPY, A, Y) - risk_gradient(LossKind.CROSS_ENTROPY, B, Y))
        assert gap <= L * np.linalg.norm(A - B) + 1e-15


# ── Scalar proximal maps ───────────────────────────────────────────────────

@pytest.mark.parametrize("a, b, gamma, expected", [
    (0.0, 0.0, 1.0, 0.0),
    (2.0, 1.0, 1.0, 1.5),
    (-3.0, 1.0, 1.0, 0.0),
    (1.0, -0.2, 1.0, 0.4),
])
def test_relu_quad_prox_examples(a, b, gamma, expected):
    assert relu_quad_prox(a, b, gamma) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("a, b, gamma, expected", [
    (0.0, 7.0, 3.0, 7.0),
    (1.0, 0.0, 1.0, 1.0),
    (2.0, 0.3, 1.0, 0.5),
    (1.0, 2.0, 1.0, 2.0),
])
def test_hinge_prox_examples(a, b, gamma, expected):
    assert hinge_prox(a, b, gamma) == pytest.approx(expected, abs=1e-12)


def test_prox_rejects_nonpositive_gamma():
    with pytest.raises(ValueError):
        relu_quad_prox(1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        hinge_prox(1.0, 1.0, -1.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5, **finite), st.floats(-5, 5, **finite), st.floats(0.1, 10, **finite))
def test_relu_quad_prox_is_global_minimizer(a, b, gamma):
    got = relu_quad_prox(a, b, gamma)
    _, best = relu_oracle(a, b, gamma)
    assert relu_objective(got, a, b, gamma) <= best[0] + 1e-8


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5, **finite), st.floats(-5, 5, **finite), st.floats(0.1, 10, **finite))
def test_hinge_prox_is_global_minimizer(a, b, gamma):
    got = hinge_prox(a, b, gamma)
    _, best = hinge_oracle(a, b, gamma)
    assert hinge_objective(got, a, b, gamma) <= best[0] + 1e-8


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5, **finite), st.floats(-5, 5, **finite), st.floats(0.1, 10, **finite))
def test_leaky_with_zero_slope_matches_relu(a, b, gamma):
    leaky = leaky_relu_quad_prox(a, b, gamma, 0.0)
    relu = relu_quad_prox(a, b, gamma)
    assert leaky_objective(leaky, a, b, gamma, 0.0) == pytest.approx(relu_objective(relu, a, b, gamma), abs=1e-12)


def test_relu_quad_prox_is_vectorized(rng):
    a, b = rng.uniform(-5, 5, 50), rng.uniform(-5, 5, 50)
    out = relu_quad_prox(a, b, 2.0)
    assert out.shape == (50,)
    assert out[7] == relu_quad_prox(a[7], b[7], 2.0)


def test_smooth_min_examples():
    b = 0.7
    u = smooth_scalar_quad_min(SIGMOID, float(expit(b)), b, 1.0)
    f = smooth_objective(SIGMOID)
    assert f(u, expit(b), b, 1.0) <= 1e-10
    assert smooth_scalar_quad_min(TANH, 0.0, 0.0, 1.0) == pytest.approx(0.0, abs=1e-9)

    got = smooth_scalar_quad_min(SIGMOID, 0.9, 0.0, 5.0)
    _, best = smooth_oracle(SIGMOID, 0.9, 0.0, 5.0, points=1_000_000)
    assert f(got, 0.9, 0.0, 5.0) <= best[0] + 1e-6


@settings(max_examples=60, deadline=None)
@given(st.sampled_from([SIGMOID, TANH]), st.floats(-1.5, 1.5, **finite),
       st.floats(-5, 5, **finite), st.floats(0.1, 10, **finite))
def test_smooth_min_is_global_minimizer(act, v, b, gamma):
    got = smooth_scalar_quad_min(act, v, b, gamma)
    _, best = smooth_oracle(act, v, b, gamma)
    assert smooth_objective(act)(got, v, b, gamma) <= best[0] + 1e-8


def test_smooth_min_rejects_piecewise_linear():
    with pytest.raises(UnsupportedError):
        smooth_scalar_quad_min(RELU, 0.0, 0.0, 1.0)


def test_activation_prox_identity_closed_form():
    assert activation_prox(Activation(ActKind.IDENTITY), 3.0, 1.0, 2.0) == pytest.approx(5.0 / 3.0)


# ── Regularizers ───────────────────────────────────────────────────────────

def test_reg_quad_argmin_examples(rng):
    C = rng.standard_normal((2, 3))
    np.testing.assert_array_equal(reg_quad_argmin(Regularizer(), C, 3.0), C)
    np.testing.assert_array_equal(reg_quad_argmin(Regularizer(RegKind.L1, lam=1.0), np.array([[2.0, -0.5]]), 1.0),
                                  [[1.0, 0.0]])
    np.testing.assert_array_equal(reg_quad_argmin(Regularizer(RegKind.NONNEG), np.array([[-3.0, 4.0]]), 7.0),
                                  [[0.0, 4.0]])
    np.testing.assert_allclose(reg_quad_argmin(Regularizer(RegKind.FRO, lam=0.5), C, 1.0), C / 2.0)
    np.testing.assert_array_equal(reg_quad_argmin(Regularizer(RegKind.BOX, lo=-1.0, hi=1.0), np.array([[-3.0, 0.5, 2.0]]), 1.0),
                                  [[-1.0, 0.5, 1.0]])


def test_elastic_net_prox_soft_thresholds_then_shrinks():
    reg = Regularizer(RegKind.ELASTIC, lam=1.0, lam2=0.5)
    out = reg_quad_argmin(reg, np.array([[3.0, -0.5]]), 2.0)
    np.testing.assert_allclose(out, [[2.5 * 2.0 / 3.0, 0.0]])


def test_reg_value():
    X = np.array([[1.0, -2.0]])
    assert reg_value(Regularizer(), X) == 0.0
    assert reg_value(Regularizer(RegKind.FRO, lam=0.5), X) == 2.5
    assert reg_value(Regularizer(RegKind.L1, lam=2.0), X) == 6.0
    assert reg_value(Regularizer(RegKind.ELASTIC, lam=1.0, lam2=1.0), X) == 8.0
    assert reg_value(Regularizer(RegKind.NONNEG), X) == math.inf
    assert reg_value(Regularizer(RegKind.NONNEG), np.abs(X)) == 0.0
    assert reg_value(Regularizer(RegKind.BOX, lo=-2.0, hi=1.0), X) == 0.0
    with pytest.raises(ValueError):
        reg_quad_argmin(Regularizer(), X, 0.0)
