"""Acceptance criteria for the reactor benchmark.

Each test prints one ``PASS``/``FAIL`` line (visible even under output
capture) before asserting. Run standalone with
``python3 tests/test_acceptance.py`` or through pytest.
"""
import math
import sys
import time

import numpy as np
import pytest

from empclab.empc import eventual_deviation, mpc_feedback, simulate_closed_loop
from empclab.horizon import INF, SampleGrid, horizon_map_closed_loop, horizon_map_terminal
from empclab.lq import (LqData, adjoint_boundary_analysis, build_lq, check_nstep_reachability,
                        dense_qp_gain, prediction_mismatch, riccati)
from empclab.model import reactor_model
from empclab.ocp import SchemeConfig, probe_feasibility, solve_ocp
from empclab.sop import solve_sop

pytestmark = pytest.mark.slow

# tolerances
STEADY_TOL = 1e-6
STEADY_SECONDS = 1.0
TERMINAL_AGGREGATE, TERMINAL_SLACK = 7, 1
ENVELOPE_PREFACTOR, ENVELOPE_RATE, ENVELOPE_FACTOR = 7.6e-2, 0.29, 3.0
SLOPE_TOL = 0.10
EL_TOL = 1e-6
FEEDBACK_TOL = 1e-6
GAIN_TOL = 1e-8
FIXED_POINT_TOL = 1e-12
RATIO_FACTOR = 2.0
X0 = [0.2, 0.8]


def report(capsys, tag, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {tag}: {detail}")
    return ok


@pytest.fixture(scope="module")
def setup():
    m = reactor_model()
    return m, solve_sop(m)


def test_criterion_1_steady_state(capsys):
    m = reactor_model()
    t = time.perf_counter()
    s = solve_sop(m)
    dt = time.perf_counter() - t
    err = max(np.max(np.abs(s.x - [0.5, 0.5])), np.max(np.abs(s.u - [12.0])),
              np.max(np.abs(s.lam - [-100.0, -200.0])))
    ok = err <= STEADY_TOL and dt < STEADY_SECONDS
    assert report(capsys, "C1 steady state", ok, f"max error {err:.2e} (tol {STEADY_TOL:g}), {dt:.3f} s")


def test_criterion_2_gradcorr_horizon(capsys, setup):
    m, s = setup
    hm = horizon_map_closed_loop(m, s, "gradcorr", SampleGrid.for_model(m, 0.05), rho=1e-3, N_cl=200)
    ok = hm.aggregate == 1 and all(v == 1 for v in hm.values)
    assert report(capsys, "C2 gradient-corrected horizon", ok,
                  f"aggregate {hm.aggregate} over {len(hm.values)} samples, unresolved "
                  f"{sum(1 for u in hm.unresolved if u)}")


def _line_monotone(points, values):
    """Along the reachable line, N must not decrease moving away from the steady state."""
    pts = [(p[0], v) for p, v in zip(points, values) if v != INF]
    pts.sort()
    xa = np.array([p[0] for p in pts])
    vals = np.array([p[1] for p in pts])
    centre = int(np.argmin(np.abs(xa - 0.5)))
    left = vals[:centre + 1][::-1]
    right = vals[centre:]
    return (bool(np.all(np.diff(left) >= 0) and np.all(np.diff(right) >= 0)),
            [(round(a, 3), int(v)) for a, v in zip(xa, vals)])


def test_criterion_3_terminal_horizon(capsys, setup):
    m, s = setup
    grid = SampleGrid.for_model(m, 0.05)
    hm = horizon_map_terminal(m, s, grid, N_max=30)
    agg = hm.aggregate
    monotone, profile = _line_monotone(grid.points, hm.values)
    corners = [v for p, v in zip(grid.points, hm.values) if v != INF and min(p[0], p[1]) <= 0.05]
    hardest = bool(corners) and max(corners) == agg
    ok = abs(agg - TERMINAL_AGGREGATE) <= TERMINAL_SLACK and monotone and hardest
    assert report(capsys, "C3 terminal-equality horizon", ok,
                  f"aggregate {agg} (target {TERMINAL_AGGREGATE}+-{TERMINAL_SLACK}), "
                  f"{len(hm.finite)} feasible / {hm.infeasible_count} infeasible, "
                  f"monotone toward corners {monotone}, max at a corner {hardest}; profile {profile}")


def test_criterion_4_plain_envelope(capsys, setup):
    m, s = setup
    cfg = SchemeConfig("plain", s)
    Ns = list(range(4, 16))
    devs = []
    for N in Ns:
        tr = simulate_closed_loop(m, cfg, N, X0, 200)
        devs.append(eventual_deviation(tr, s) if tr.complete else math.nan)
    devs = np.array(devs)
    env = ENVELOPE_PREFACTOR * np.exp(-ENVELOPE_RATE * np.array(Ns))
    ratio = devs / env
    slope = float(np.polyfit(Ns, np.log(devs), 1)[0])
    ok = (np.all(devs > 0) and np.all(np.diff(devs) <= 0)
          and np.all((ratio >= 1 / ENVELOPE_FACTOR) & (ratio <= ENVELOPE_FACTOR))
          and abs(slope + ENVELOPE_RATE) <= SLOPE_TOL)
    assert report(capsys, "C4 plain-scheme decay envelope", ok,
                  f"ratios to envelope {ratio.min():.2f}..{ratio.max():.2f}, fitted slope {slope:.3f} "
                  f"(target -{ENVELOPE_RATE}+-{SLOPE_TOL})")


def test_criterion_5_euler_lagrange(capsys, setup):
    m, s = setup
    rng = np.random.default_rng(2024)
    worst, converged, infeasible = 0.0, 0, 0
    for _ in range(50):
        kind = ["terminal", "plain", "gradcorr"][rng.integers(3)]
        N = int(rng.integers(1, 21))
        if kind == "terminal" and rng.random() < 0.5:
            a = rng.random()
            x0 = [a, 1.0 - a]       # reachable line
        else:
            x0 = rng.random(2)
        sol = solve_ocp(m, SchemeConfig(kind, s), N, x0)
        if sol.converged:
            converged += 1
            worst = max(worst, sol.el.max_residual)
        elif not sol.feasible:
            infeasible += 1
    ok = worst <= EL_TOL and converged + infeasible == 50
    assert report(capsys, "C5 Euler-Lagrange residuals", ok,
                  f"{converged} converged, {infeasible} infeasible (terminal), worst residual {worst:.2e}")


def test_criterion_6_invariance_dichotomy(capsys, setup):
    m, s = setup
    dev = {}
    for kind in ("terminal", "plain", "gradcorr"):
        dev[kind] = [abs(mpc_feedback(m, SchemeConfig(kind, s), N, s.x)[0][0] - 12.0) for N in range(1, 11)]
    ok = (max(dev["terminal"]) <= FEEDBACK_TOL and max(dev["gradcorr"]) <= FEEDBACK_TOL
          and min(dev["plain"]) > FEEDBACK_TOL)
    assert report(capsys, "C6 invariance dichotomy", ok,
                  f"max |u-12| (i) {max(dev['terminal']):.1e}, (iii) {max(dev['gradcorr']):.1e}; "
                  f"min |u-12| (ii) {min(dev['plain']):.3f}")


def _random_stabilizable(rng):
    while True:
        nx, nu = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        M = rng.standard_normal((nx + nu, nx + nu))
        W = M @ M.T + 0.1 * np.eye(nx + nu)
        lq = LqData(A=rng.standard_normal((nx, nx)), B=rng.standard_normal((nx, nu)),
                    C=np.zeros((0, nx)), D=np.zeros((0, nu)), Q=W[:nx, :nx], S=W[:nx, nx:], R=W[nx:, nx:],
                    q=np.zeros(nx), r=np.zeros(nu), P_N=np.eye(nx), p_N=np.zeros(nx))
        if check_nstep_reachability(lq):
            return lq


def test_criterion_7_lq_oracles(capsys, setup):
    m, s = setup
    rng = np.random.default_rng(7)
    instances = [build_lq(m, s, SchemeConfig("gradcorr", s))] + [_random_stabilizable(rng) for _ in range(20)]
    worst = 0.0
    for lq in instances:
        for N in (1, 5, 10):
            gains, _, failure = riccati(lq, N)
            assert not failure
            K = dense_qp_gain(lq, N)
            worst = max(worst, float(np.max(np.abs(gains[0] - K)) / max(1.0, np.max(np.abs(K)))))
    adj = adjoint_boundary_analysis(instances[0], s, 20)
    drift = float(np.max(np.abs(adj.from_steady.lam - s.lam)))
    ok = worst <= GAIN_TOL and drift <= FIXED_POINT_TOL
    assert report(capsys, "C7 LQ oracle equivalence", ok,
                  f"worst gain mismatch {worst:.1e} over {len(instances)} instances, adjoint drift {drift:.1e}")


def test_criterion_8_feasible_set_inclusion(capsys, setup):
    m, s = setup
    rng = np.random.default_rng(8)
    cfg = {k: SchemeConfig(k, s) for k in ("terminal", "plain", "gradcorr")}
    implication, agreement, feasible_i = 0, 0, 0
    for j in range(200):
        N = int(rng.integers(1, 11))
        if j % 2:
            a = rng.random()
            x0 = [a, 1.0 - a]
        else:
            x0 = rng.random(2)
        fi = probe_feasibility(m, cfg["terminal"], N, x0)
        fii = probe_feasibility(m, cfg["plain"], N, x0)
        fiii = probe_feasibility(m, cfg["gradcorr"], N, x0)
        feasible_i += fi
        implication += (not fi) or fii
        agreement += fii == fiii
    ok = implication == 200 and agreement == 200
    assert report(capsys, "C8 feasible-set inclusion", ok,
                  f"(i)=>(ii) holds on {implication}/200, (ii)==(iii) on {agreement}/200, "
                  f"(i) feasible on {feasible_i}")


def test_criterion_9_lq_scaling(capsys, setup):
    m, s = setup
    cfg = SchemeConfig("gradcorr", s)
    deltas = [1e-1, 3e-2, 1e-2]
    rng = np.random.default_rng(9)
    dirs = [np.array([1.0, 0.0]), np.array([1.0, -1.0]) / math.sqrt(2)]
    dirs += [d / np.linalg.norm(d) for d in rng.standard_normal((3, 2))]
    worst, notes = 0.0, []
    ok = True
    for d in dirs:
        mis = [prediction_mismatch(m, s, cfg, 10, s.x + dl * d) for dl in deltas]
        if any(math.isnan(v) for v in mis):
            ok = False
            notes.append(f"d={d.round(3).tolist()} unsolved")
            continue
        if max(mis) <= 1e-9:
            notes.append(f"d={d.round(3).tolist()} exact")
            continue
        for (d1, m1), (d2, m2) in zip(zip(deltas, mis), zip(deltas[1:], mis[1:])):
            r = (m2 / m1) / (d2 / d1) ** 2
            worst = max(worst, r)
            ok &= r <= RATIO_FACTOR
        notes.append(f"d={d.round(3).tolist()} mismatch {mis[0]:.1e}->{mis[-1]:.1e}")
    assert report(capsys, "C9 LQ approximation scaling", ok,
                  f"worst ratio to quadratic decay {worst:.2f} (limit {RATIO_FACTOR}); " + "; ".join(notes))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
