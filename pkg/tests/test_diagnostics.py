from __future__ import annotations

import math

import pytest
from conftest import toy_spec

from bcdtrain.diagnostics import (
    UNSET,
    TraceRecord,
    bbar_constant,
    descent_certified,
    descent_check,
    iterate_bound,
    monotone_check,
    rate_summary,
    residual_checkable,
    subgrad_residual,
    sufficient_descent_constant,
    summarize,
)
from bcdtrain.operators import LossKind, RegKind, Regularizer
from bcdtrain.solver import run_epoch
from bcdtrain.state import Form, Hyperparams, ObjectiveBreakdown, VnStrategy, forward_init, init_weights


def _record(epoch: int, total: float, delta_sq: float, residual: float = UNSET, bbar: float = UNSET) -> TraceRecord:
    return TraceRecord(epoch, ObjectiveBreakdown(total, 0.0, 0.0, 0.0, total), delta_sq, residual, bbar,
                       0.5, UNSET, 0.0)


def test_descent_check_examples():
    ok = descent_check(10.0, 9.0, 1.0, 0.5)
    assert ok.passed and ok.slack == pytest.approx(0.5)
    bad = descent_check(10.0, 9.8, 1.0, 0.5)
    assert not bad.passed and bad.slack == pytest.approx(-0.3)


def test_monotone_check_tolerates_rounding():
    assert monotone_check(1.0, 1.0 + 1e-12).passed
    assert not monotone_check(1.0, 1.001).passed


def test_sufficient_descent_constant():
    assert sufficient_descent_constant(Hyperparams(gamma=1.0, alpha=1.0)) == 0.5
    assert sufficient_descent_constant(Hyperparams(gamma=4.0, alpha=0.6)) == pytest.approx(0.3)
    hp = Hyperparams(gamma=0.2, alpha=0.1, vn_strategy=VnStrategy.PROX_LINEAR)
    assert sufficient_descent_constant(hp, L_R=0.3) == pytest.approx(0.05)


def test_bbar_constant_examples():
    assert bbar_constant(1.0, 1.0, 1.0, 1.0, 1) == pytest.approx(3.0 * math.sqrt(3.0))
    assert bbar_constant(0.0, 0.5, 1.0, 2.0, 2) == pytest.approx((2.0 + 0.5) * math.sqrt(6.0))
    assert bbar_constant(1.0, 1.0, 1.0, 1.0, 1, L_R=5.0, proxlinear=True) == pytest.approx(7.0 * math.sqrt(3.0))
    assert bbar_constant(1.0, 1.0, 1.0, 1.0, 1, residual=True) == pytest.approx(6.0 * math.sqrt(3.0))


def test_rate_summary_examples():
    single = rate_summary([_record(0, 4.0, 0.0), _record(1, 3.0, 2.0)], a=0.5)
    assert single.cesaro == [2.0] and single.bound == [8.0] and single.passed

    flat = rate_summary([_record(k, 1.0, 0.0) for k in range(5)], a=0.5)
    assert flat.cesaro == [0.0] * 4 and flat.passed

    broken = rate_summary([_record(0, 1.0, 0.0), _record(1, 0.5, 10.0)], a=0.5)
    assert not broken.passed
    with pytest.raises(ValueError):
        rate_summary([], a=0.5)


def test_descent_certified_scope():
    hp = Hyperparams()
    assert descent_certified(Form.TWO_SPLIT, hp, 3)
    assert descent_certified(Form.THREE_SPLIT, hp, 3)
    l1 = Hyperparams(v_reg=(Regularizer(RegKind.L1, lam=0.1),))
    assert descent_certified(Form.TWO_SPLIT, l1, 3)
    assert not descent_certified(Form.THREE_SPLIT, l1, 3)
    assert not descent_certified(Form.THREE_SPLIT, Hyperparams(batch_size=4), 3)


def test_residual_checkable_scope():
    assert residual_checkable(Form.THREE_SPLIT, Hyperparams(), 3)
    assert residual_checkable(Form.RESIDUAL, Hyperparams(), 3)
    assert not residual_checkable(Form.TWO_SPLIT, Hyperparams(), 3)
    assert not residual_checkable(Form.THREE_SPLIT, Hyperparams(w_reg=(Regularizer(RegKind.L1, lam=0.1),)), 3)
    assert not residual_checkable(Form.THREE_SPLIT, Hyperparams(v_reg=(Regularizer(RegKind.L1, lam=0.1),)), 3)
    assert not residual_checkable(Form.THREE_SPLIT, Hyperparams(batch_size=4), 3)


def test_subgrad_residual_is_zero_at_fixed_point(toy_data):
    spec = toy_spec(Form.THREE_SPLIT)
    state = forward_init(spec, init_weights(spec, 0.3, 0.0, seed=1), toy_data.X)
    assert subgrad_residual(Form.THREE_SPLIT, state, state, toy_data.Y, Hyperparams()) == 0.0


@pytest.mark.parametrize("form", [Form.THREE_SPLIT, Form.RESIDUAL])
@pytest.mark.parametrize("loss", [LossKind.SQUARED, LossKind.CROSS_ENTROPY])
def test_subgrad_residual_within_bbar_after_one_epoch(form, loss, toy_data):
    spec = toy_spec(form, "tanh", bias=True)
    hp = Hyperparams(loss=loss)
    prev = forward_init(spec, init_weights(spec, 0.3, 0.1, seed=4), toy_data.X, form)
    result = run_epoch(form, prev, toy_data.Y, hp)
    B = max(iterate_bound(prev), iterate_bound(result.state))
    L_R = hp.risk_lipschitz(toy_data.n, spec.dims[-1])
    bbar = bbar_constant(B, 1.0, hp.gamma, hp.alpha, spec.N, L_R, hp.prox_linear, form is Form.RESIDUAL)
    residual = subgrad_residual(form, prev, result.state, toy_data.Y, hp)
    assert residual <= bbar * math.sqrt(result.delta_sq) + 1e-6


def test_summarize_counts_and_verdicts():
    hp = Hyperparams()
    good = [_record(0, 10.0, 0.0), _record(1, 8.0, 2.0, 0.1, 1.0), _record(2, 7.0, 1.0, 0.1, 1.0)]
    v = summarize(good, Form.THREE_SPLIT, hp, 3, a=0.5)
    assert (v.epochs, v.descent_pass, v.descent_pass_count, v.rate_pass, v.residual_pass) == (2, True, 2, True, True)

    slow = [_record(0, 10.0, 0.0), _record(1, 9.9, 2.0, 5.0, 1.0)]
    v = summarize(slow, Form.THREE_SPLIT, hp, 3, a=0.5)
    assert not v.descent_pass and v.descent_pass_count == 0 and v.residual_pass is False

    l1 = Hyperparams(v_reg=(Regularizer(RegKind.L1, lam=0.1),))
    v = summarize(slow, Form.THREE_SPLIT, l1, 3, a=0.5)
    assert v.descent_pass and not v.rate_checked and v.residual_pass is None

    w_l1 = Hyperparams(w_reg=(Regularizer(RegKind.L1, lam=0.1),), inner_iters=3)
    v = summarize(slow, Form.THREE_SPLIT, w_l1, 3, a=0.5)
    assert v.rate_checked and v.residual_pass is None
