"""Receding-horizon closed loop, deviation metrics, dissipation and turnpike checks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model import ContractError, PlantModel
from .nlp import NlpSettings
from .ocp import OcpSolution, SchemeConfig, solve_ocp
from .sop import SteadyState


class ClosedLoopAbort(RuntimeError):
    def __init__(self, step: int, solution: OcpSolution):
        super().__init__(f"OCP not solved at closed-loop step {step}: {solution.status.value} ({solution.message})")
        self.step = step
        self.solution = solution


def mpc_feedback(model: PlantModel, scheme: SchemeConfig, N: int, x, warm: Optional[OcpSolution] = None,
                 settings: Optional[NlpSettings] = None, step: int = 0):
    """First optimal input and the full solution; raises :class:`ClosedLoopAbort` if unsolved."""
    sol = solve_ocp(model, scheme, N, x, warm=warm, settings=settings)
    if not sol.converged:
        raise ClosedLoopAbort(step, sol)
    return sol.u[0].copy(), sol


def shift_solution(sol: OcpSolution, steady: Optional[SteadyState], model: PlantModel) -> OcpSolution:
    """Drop stage 0 and append the steady pair (or a copy of the last stage without one)."""
    if steady is not None:
        x_end, u_end, lam_end = steady.x, steady.u, steady.lam
    else:
        x_end, u_end, lam_end = sol.x[-1], sol.u[-1], sol.lam[-1]
    mu = np.zeros_like(sol.mu)
    mu[:-1] = sol.mu[1:]
    srows = list(model.state_rows)
    mu[-1, srows] = sol.mu[-1, srows]
    return OcpSolution(
        x=np.vstack([sol.x[1:], x_end]), u=np.vstack([sol.u[1:], u_end]),
        lam=np.vstack([sol.lam[1:], lam_end]), mu=mu, objective=sol.objective, status=sol.status,
        N=sol.N, x0=sol.x[1].copy(), scheme=sol.scheme, terminal_multiplier=sol.terminal_multiplier,
    )


@dataclass
class ClosedLoopTrace:
    x: np.ndarray               # (T+1, n_x) applied states
    u: np.ndarray               # (T, n_u) applied inputs
    values: np.ndarray          # optimal values V_N per step
    stage_costs: np.ndarray
    statuses: list
    lam0: np.ndarray            # (T, n_x)
    iterations: list = field(default_factory=list)
    aborted_at: Optional[int] = None
    message: str = ""

    @property
    def steps(self) -> int:
        return self.u.shape[0]

    @property
    def complete(self) -> bool:
        return self.aborted_at is None


def simulate_closed_loop(model: PlantModel, scheme: SchemeConfig, N: int, x0, steps: int,
                         settings: Optional[NlpSettings] = None, warm_start: bool = True) -> ClosedLoopTrace:
    if steps < 1:
        raise ContractError("steps must be >= 1")
    x = np.asarray(x0, dtype=float).reshape(-1)
    xs, us, vals, costs, stats, lams, its = [x.copy()], [], [], [], [], [], []
    warm = None
    aborted, message = None, ""
    for i in range(steps):
        try:
            u, sol = mpc_feedback(model, scheme, N, x, warm, settings, step=i)
        except ClosedLoopAbort as exc:
            aborted, message = i, str(exc)
            stats.append(exc.solution.status.value)
            break
        x = np.asarray(model.f(x, u), dtype=float)
        xs.append(x.copy())
        us.append(u)
        vals.append(sol.objective)
        costs.append(float(model.l(xs[-2], u)))
        stats.append(sol.status.value)
        lams.append(sol.lam[0].copy())
        its.append(sol.iterations)
        warm = shift_solution(sol, scheme.steady, model) if warm_start else None
    nu = model.n_u
    return ClosedLoopTrace(
        x=np.array(xs), u=np.array(us).reshape(-1, nu), values=np.array(vals), stage_costs=np.array(costs),
        statuses=stats, lam0=np.array(lams).reshape(-1, model.n_x), iterations=its,
        aborted_at=aborted, message=message,
    )


def eventual_deviation(trace: ClosedLoopTrace, s: SteadyState, tail_fraction: float = 0.25) -> float:
    """Largest distance to ``x_bar`` over the final ``tail_fraction`` of the applied states."""
    if not trace.complete:
        raise ContractError(f"trace aborted at step {trace.aborted_at}")
    if not 0.0 < tail_fraction <= 1.0:
        raise ContractError("tail_fraction must lie in (0, 1]")
    n = trace.x.shape[0]
    tail = max(1, math.ceil(tail_fraction * n))
    return float(np.max(np.linalg.norm(trace.x[n - tail:] - s.x, axis=1)))


def final_deviation(trace: ClosedLoopTrace, s: SteadyState) -> float:
    return float(np.linalg.norm(trace.x[-1] - s.x))


def convergence_step(trace: ClosedLoopTrace, s: SteadyState, tol: float = 1e-6) -> Optional[int]:
    """First step after which the state stays within ``tol`` of ``x_bar`` (None if never)."""
    d = np.linalg.norm(trace.x - s.x, axis=1)
    outside = np.flatnonzero(d > tol)
    if outside.size == 0:
        return 0
    k = int(outside[-1]) + 1
    return k if k < d.size else None


# --- dissipation ---------------------------------------------------------------

@dataclass
class StorageCandidate:
    fn: Callable
    description: str = ""

    def __call__(self, x) -> float:
        return float(self.fn(np.asarray(x, dtype=float)))

    def min_on_samples(self, samples) -> float:
        return min(self(x) for x in samples)


def _box_corners(model: PlantModel):
    b = model.bounds
    if b is None:
        raise ContractError("model has no box bounds")
    lo, hi = b.x_lower, b.x_upper
    grids = np.meshgrid(*[[l, h] for l, h in zip(lo, hi)], indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=1)


def linear_storage(model: PlantModel, s: SteadyState) -> StorageCandidate:
    """``S(x) = -lambda_bar'(x - x_bar) + offset`` with the smallest offset keeping S >= 0 on the box.

    With the dynamics row written as ``f(x, u) - x``, this sign makes the
    rotated cost equal the steady Lagrangian minus ``l_bar``.
    """
    lam, xb = s.lam.copy(), s.x.copy()
    corners = _box_corners(model)
    offset = float(np.max(corners @ lam - lam @ xb))

    def fn(x):
        return -lam @ (x - xb) + offset

    return StorageCandidate(fn, f"linear: -lambda_bar'(x - x_bar) + {offset:g}")


@dataclass
class DissipationReport:
    residuals: np.ndarray       # S(f) - S(x) - (l - l_bar) [+ alpha(d)], <= 0 required
    rotated_cost: np.ndarray    # l - l_bar + S(x) - S(f)
    strict: bool
    max_violation: float
    violations: int
    storage_min: float

    @property
    def passed(self) -> bool:
        return self.violations == 0


def check_dissipation(model: PlantModel, s: SteadyState, storage: StorageCandidate,
                      pairs: Sequence, strict: bool = False, c: float = 1e-4,
                      tol: float = 1e-12) -> DissipationReport:
    """Evaluate the dissipation inequality pair by pair; violations are counted, never dropped."""
    zbar = np.concatenate([s.x, s.u])
    res, rot, smin = [], [], np.inf
    for x, u in pairs:
        x = np.asarray(x, dtype=float).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(-1)
        sx, sf = storage(x), storage(model.f(x, u))
        smin = min(smin, sx)
        rotated = float(model.l(x, u)) - s.cost + sx - sf
        r = -rotated
        if strict:
            d = float(np.linalg.norm(np.concatenate([x, u]) - zbar))
            r += c * d * d
        res.append(r)
        rot.append(rotated)
    res = np.array(res)
    bad = res > tol
    return DissipationReport(res, np.array(rot), strict, float(np.max(res, initial=-np.inf)),
                             int(bad.sum()), float(smin))


def box_pairs(model: PlantModel, points: int = 11):
    """Uniform grid of (x, u) pairs over the model box."""
    b = model.bounds
    if b is None:
        raise ContractError("model has no box bounds")
    axes = [np.linspace(lo, hi, points) for lo, hi in
            zip(np.concatenate([b.x_lower, b.u_lower]), np.concatenate([b.x_upper, b.u_upper]))]
    mesh = np.stack([g.reshape(-1) for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    return [(z[:model.n_x], z[model.n_x:]) for z in mesh]


def turnpike_metric(sol: OcpSolution, s: SteadyState, eps: float) -> int:
    """Number of stages ``k < N`` whose pair lies farther than ``eps`` from the steady pair."""
    if not eps > 0:
        raise ContractError("eps must be positive")
    zbar = np.concatenate([s.x, s.u])
    z = np.hstack([sol.x[:-1], sol.u])
    return int(np.sum(np.linalg.norm(z - zbar, axis=1) > eps))
