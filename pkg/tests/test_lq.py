import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from empclab.lq import (LqData, adjoint_boundary_analysis, build_lq, check_adjoint_observability,
                        check_local_stabilization, check_nstep_reachability, dense_qp_gain,
                        propagate_adjoint, riccati)
from empclab.model import ContractError


def lq_data(A, B, Q, R, S=None, q=None, r=None, P_N=None, p_N=None):
    A = np.atleast_2d(np.asarray(A, float))
    nx = A.shape[0]
    B = np.asarray(B, float).reshape(nx, -1)
    nu = B.shape[1]
    return LqData(A=A, B=B, C=np.zeros((0, nx)), D=np.zeros((0, nu)), Q=Q, R=R,
                  S=np.zeros((nx, nu)) if S is None else S,
                  q=np.zeros(nx) if q is None else q, r=np.zeros(nu) if r is None else r,
                  P_N=np.zeros((nx, nx)) if P_N is None else P_N, p_N=np.zeros(nx) if p_N is None else p_N)


def random_instance(seed, nx=None, nu=None):
    rng = np.random.default_rng(seed)
    nx = nx or int(rng.integers(1, 4))
    nu = nu or int(rng.integers(1, 3))
    A = rng.standard_normal((nx, nx))
    B = rng.standard_normal((nx, nu))
    M = rng.standard_normal((nx + nu, nx + nu))
    W = M @ M.T + 0.1 * np.eye(nx + nu)
    Pm = rng.standard_normal((nx, nx))
    return lq_data(A, B, W[:nx, :nx], W[nx:, nx:], S=W[:nx, nx:], P_N=Pm @ Pm.T)


def test_reactor_blocks(reactor, steady, schemes):
    lq = build_lq(reactor, steady, schemes["plain"])
    np.testing.assert_allclose(lq.A, [[0.76, 0.0], [0.12, 0.88]], atol=1e-10)
    np.testing.assert_allclose(lq.B, [[0.005], [-0.005]], atol=1e-12)
    np.testing.assert_allclose(lq.r, [-0.5], atol=1e-9)
    np.testing.assert_allclose(lq.q, [0.0, -24.0], atol=1e-9)
    np.testing.assert_allclose(lq.Q, 0.0)
    np.testing.assert_allclose(lq.S, [[1.0], [0.0]], atol=1e-8)
    np.testing.assert_allclose(lq.R, [[0.2]])
    np.testing.assert_array_equal(lq.p_N, 0.0)


def test_gradcorr_terminal_terms(reactor, steady, schemes):
    lq = build_lq(reactor, steady, schemes["gradcorr"])
    np.testing.assert_allclose(lq.p_N, [-100.0, -200.0], atol=1e-6)
    np.testing.assert_array_equal(lq.P_N, 0.0)
    assert not build_lq(reactor, steady, schemes["terminal"]).p_N.any()


def test_boundary_steady_state_refused(reactor, steady, schemes):
    edge = dataclasses.replace(steady, interior=False)
    with pytest.raises(ContractError):
        build_lq(reactor, edge, schemes["plain"])


def test_asymmetric_weight_rejected():
    with pytest.raises(ContractError):
        lq_data([[1.0, 0], [0, 1]], [[1.0], [0]], [[1.0, 2.0], [0.0, 1.0]], [[1.0]])


def test_reactor_locally_stabilized(reactor, steady, schemes):
    for N in (1, 5, 10, 20):
        rep = check_local_stabilization(build_lq(reactor, steady, schemes["gradcorr"]), N)
        assert rep.passed and rep.spectral_radius < 1


def test_one_step_scalar_riccati():
    rep = check_local_stabilization(lq_data([[0.5]], [[1.0]], [[1.0]], [[1.0]], P_N=[[1.0]]), 1)
    assert rep.K0[0, 0] == pytest.approx(-0.25)
    assert rep.spectral_radius == pytest.approx(0.25)
    assert rep.passed


def test_uncontrollable_unstable_fails():
    rep = check_local_stabilization(lq_data([[1.1, 0], [0, 0.5]], [[0.0], [0.0]], np.eye(2), [[1.0]]), 10)
    assert not rep.passed
    assert rep.spectral_radius == pytest.approx(1.1)


def test_singular_input_weight_flagged():
    rep = check_local_stabilization(lq_data([[0.5]], [[1.0]], [[1.0]], [[0.0]]), 5)
    assert rep.singular and not rep.passed
    assert "singular" in rep.message


def test_indefinite_iterate_reported():
    gains, costs, failure = riccati(lq_data([[1.0]], [[1.0]], [[0.0]], [[-1.0]]), 3)
    assert failure


def test_reactor_pair_is_not_reachable(reactor, steady, schemes):
    # A B = 0.76 B: the controllability matrix has rank one
    lq = build_lq(reactor, steady, schemes["plain"])
    assert not check_nstep_reachability(lq)
    assert not check_adjoint_observability(lq)


def test_reachability_examples():
    assert not check_nstep_reachability(lq_data(np.eye(2), np.zeros((2, 1)), np.eye(2), [[1.0]]))
    assert check_nstep_reachability(lq_data([[0, 1.0], [0, 0]], [[0.0], [1.0]], np.eye(2), [[1.0]]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rank_drop=st.booleans())
def test_reachability_equals_adjoint_observability(seed, rank_drop):
    lq = random_instance(seed)
    if rank_drop:
        lq.B = np.zeros_like(lq.B)
    assert check_nstep_reachability(lq) == check_adjoint_observability(lq)


def test_adjoint_from_steady_value_stays(reactor, steady, schemes):
    rep = adjoint_boundary_analysis(build_lq(reactor, steady, schemes["gradcorr"]), steady, 15)
    assert np.max(np.abs(rep.from_steady.lam - steady.lam)) <= 1e-12
    assert np.max(np.abs(rep.from_steady.u)) <= 1e-12
    assert rep.fixed_point_unique
    assert rep.fixed_point_error <= 1e-12


def test_adjoint_from_zero_never_reaches_steady_value(reactor, steady, schemes):
    rep = adjoint_boundary_analysis(build_lq(reactor, steady, schemes["plain"]), steady, 5)
    d = rep.from_zero.distance
    assert np.all(d > 0)
    # backward in k the distance shrinks geometrically
    assert np.all(np.diff(d) > 0)
    assert rep.from_zero.u[-1, 0] == pytest.approx(2.5, abs=1e-9)


def test_nilpotent_adjoint_recursion():
    prop = propagate_adjoint(lq_data([[0.0, 0.0], [0.0, 0.0]], [[1.0], [0.0]], np.zeros((2, 2)), [[1.0]]),
                             np.zeros(2), 4)
    assert not prop.lam.any()


def test_riccati_matches_dense_qp_on_reactor(reactor, steady, schemes):
    lq = build_lq(reactor, steady, schemes["plain"])
    for N in (1, 5, 10):
        gains, _, failure = riccati(lq, N)
        assert not failure
        np.testing.assert_allclose(gains[0], dense_qp_gain(lq, N), atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), N=st.integers(1, 8))
def test_riccati_matches_dense_qp_on_random_instances(seed, N):
    lq = random_instance(seed)
    gains, _, failure = riccati(lq, N)
    assert not failure
    np.testing.assert_allclose(gains[0], dense_qp_gain(lq, N), atol=1e-8, rtol=1e-8)
