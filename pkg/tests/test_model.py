import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from empclab.model import (BoxBounds, ContractError, derivative_check, eval_constraints,
                           eval_dynamics, eval_stage_cost, get_model)
from toys import affine_model

X_BAR = np.array([0.5, 0.5])
U_BAR = np.array([12.0])


@pytest.mark.parametrize("x, u, expected", [
    ([0.5, 0.5], [12.0], [0.5, 0.5]),
    ([0.0, 0.0], [0.0], [0.0, 0.0]),
    ([1.0, 0.0], [20.0], [0.88, 0.12]),
])
def test_dynamics_examples(reactor, x, u, expected):
    np.testing.assert_allclose(eval_dynamics(reactor, x, u), expected, atol=1e-14)


@pytest.mark.parametrize("x, u, expected", [
    ([0.5, 0.5], [12.0], -6.0),
    ([0.0, 0.0], [0.0], 14.4),
    ([1.0, 1.0], [12.0], -18.0),
])
def test_stage_cost_examples(reactor, x, u, expected):
    assert eval_stage_cost(reactor, x, u) == pytest.approx(expected, abs=1e-12)


def test_constraints_interior_at_steady_state(reactor):
    g = eval_constraints(reactor, X_BAR, U_BAR)
    assert g.shape == (6,)
    assert np.all(g <= -0.5)


def test_constraints_active_at_origin(reactor):
    g = eval_constraints(reactor, [0.0, 0.0], [0.0])
    # x lower (2 rows), x upper (2), u lower, u upper
    np.testing.assert_array_equal(g[[0, 1, 4]], 0.0)
    assert np.all(g <= 0)


def test_constraints_report_violation(reactor):
    g = eval_constraints(reactor, [1.2, 0.5], [12.0])
    assert g[2] == pytest.approx(0.2)
    assert g.max() == pytest.approx(0.2)


@pytest.mark.parametrize("fn", [eval_dynamics, eval_stage_cost, eval_constraints])
def test_dimension_mismatch_rejected(reactor, fn):
    with pytest.raises(ContractError):
        fn(reactor, [0.5, 0.5, 0.5], [12.0])
    with pytest.raises(ContractError):
        fn(reactor, [0.5, 0.5], [12.0, 1.0])


def test_steady_point_is_fixed(reactor):
    assert np.max(np.abs(reactor.f(X_BAR, U_BAR) - X_BAR)) <= 1e-14


def test_steady_adjoint_consistency(reactor):
    lam = np.array([-100.0, -200.0])
    adj = reactor.f_x(X_BAR, U_BAR).T @ lam + reactor.l_x(X_BAR, U_BAR)
    np.testing.assert_allclose(adj, lam, atol=1e-12)
    stat = reactor.f_u(X_BAR, U_BAR).T @ lam + reactor.l_u(X_BAR, U_BAR)
    assert abs(stat[0]) <= 1e-12


def test_reactor_derivatives_match_finite_differences(reactor):
    rep = derivative_check(reactor, samples=100, seed=0)
    assert rep.passed, rep.errors


def test_wrong_jacobian_detected(reactor):
    broken = dataclasses.replace(reactor, f_x=lambda x, u: reactor.f_x(x, u) + 0.1)
    rep = derivative_check(broken, samples=10, seed=1)
    assert not rep.passed
    assert rep.errors["f_x"] > 1e-2


def test_affine_model_derivatives_exact():
    m = affine_model([[0.9, 0.2], [0.0, 0.7]], [[1.0], [0.5]], np.eye(2), [[2.0]], q=[1.0, -1.0], r=[0.3])
    rep = derivative_check(m, samples=20, seed=3)
    assert rep.max_error <= 1e-8


def test_derivative_check_needs_samples(reactor):
    with pytest.raises(ContractError):
        derivative_check(reactor, samples=0)


def test_bounds_ordering_enforced():
    with pytest.raises(ContractError):
        BoxBounds([1.0], [0.0], [0.0], [1.0])


def test_registry():
    assert get_model("reactor").n_x == 2
    with pytest.raises(ContractError):
        get_model("nope")


@settings(max_examples=50, deadline=None)
@given(i=st.integers(0, 1), excess=st.floats(1e-3, 5.0), up=st.booleans())
def test_constraint_grows_linearly_outside_box(reactor, i, excess, up):
    x = X_BAR.copy()
    x[i] = 1.0 + excess if up else -excess
    row = (2 + i) if up else i
    g = eval_constraints(reactor, x, U_BAR)
    assert g[row] == pytest.approx(excess, rel=1e-12, abs=1e-15)
    x2 = x.copy()
    x2[i] += excess if up else -excess
    assert eval_constraints(reactor, x2, U_BAR)[row] == pytest.approx(2 * excess, rel=1e-12)
