"""LQ approximation at the steady primal-dual point.

Coordinates are deviations ``dx = x - x_bar``, ``du = u - u_bar``; the
linear terms ``q``, ``r``, ``p_N`` keep the multipliers in absolute scale, so
the LQ adjoint equals ``lambda_bar`` at the origin for the gradient-correcting
penalty. Constraint rows read ``C dx + D du + g(z_bar) <= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import ContractError, PlantModel
from .nlp import solve_qp
from .ocp import Scheme, SchemeConfig, solve_ocp
from .sop import SteadyState

RANK_TOL = 1e-8


@dataclass
class LqData:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray
    q: np.ndarray
    r: np.ndarray
    P_N: np.ndarray
    p_N: np.ndarray
    g_bar: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        nx = self.A.shape[0]
        self.B = np.asarray(self.B, dtype=float).reshape(nx, -1)
        nu = self.B.shape[1]
        self.Q = np.asarray(self.Q, dtype=float).reshape(nx, nx)
        self.S = np.asarray(self.S, dtype=float).reshape(nx, nu)
        self.R = np.asarray(self.R, dtype=float).reshape(nu, nu)
        self.q = np.asarray(self.q, dtype=float).reshape(nx)
        self.r = np.asarray(self.r, dtype=float).reshape(nu)
        self.P_N = np.asarray(self.P_N, dtype=float).reshape(nx, nx)
        self.p_N = np.asarray(self.p_N, dtype=float).reshape(nx)
        self.g_bar = np.asarray(self.g_bar, dtype=float).reshape(-1)
        ng = self.g_bar.size
        self.C = np.asarray(self.C, dtype=float).reshape(ng, nx)
        self.D = np.asarray(self.D, dtype=float).reshape(ng, nu)
        if self.A.shape != (nx, nx):
            raise ContractError("A must be square")
        for name in ("Q", "R", "P_N"):
            M = getattr(self, name)
            if not np.allclose(M, M.T, atol=1e-12):
                raise ContractError(f"{name} must be symmetric")

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]


def build_lq(model: PlantModel, s: SteadyState, scheme: SchemeConfig) -> LqData:
    if not s.interior:
        raise ContractError("steady state touches the constraints; the LQ approximation assumes them inactive")
    x, u, lam = s.x, s.u, s.lam
    mu = np.zeros(model.n_g)
    Lxx, Lxu, Luu = model.lagrangian_hessian(x, u, lam, mu, 1.0)
    p_N = s.lam.copy() if Scheme(scheme.kind) is Scheme.GRADCORR else np.zeros(model.n_x)
    return LqData(
        A=model.f_x(x, u), B=model.f_u(x, u), C=model.g_x(x, u), D=model.g_u(x, u),
        Q=Lxx, S=Lxu, R=Luu, q=model.l_x(x, u), r=model.l_u(x, u),
        P_N=np.zeros((model.n_x, model.n_x)), p_N=p_N, g_bar=model.g(x, u),
    )


# --- Riccati -----------------------------------------------------------------

@dataclass
class StabilizationReport:
    gains: list                 # K_0 .. K_{N-1}, u_k = K_k x_k
    costs: list                 # P_0 .. P_N
    spectral_radius: float
    passed: bool
    singular: bool = False
    message: str = ""

    @property
    def K0(self) -> np.ndarray:
        return self.gains[0]


def riccati(lq: LqData, N: int):
    """Backward recursion with cross term; returns ``(gains, costs, failure)``.

    ``failure`` names the first step where ``R + B'PB`` is not positive definite.
    """
    if N < 1:
        raise ContractError("N must be >= 1")
    A, B, Q, S, R = lq.A, lq.B, lq.Q, lq.S, lq.R
    P = lq.P_N.copy()
    gains = [None] * N
    costs = [None] * (N + 1)
    costs[N] = P
    for k in range(N - 1, -1, -1):
        Huu = R + B.T @ P @ B
        Hux = S.T + B.T @ P @ A
        try:
            L = np.linalg.cholesky(0.5 * (Huu + Huu.T))
        except np.linalg.LinAlgError:
            return gains, costs, f"R + B'PB not positive definite at k={k}"
        K = -np.linalg.solve(L.T, np.linalg.solve(L, Hux))
        P = Q + A.T @ P @ A + Hux.T @ K
        P = 0.5 * (P + P.T)
        gains[k] = K
        costs[k] = P
    return gains, costs, ""


def check_local_stabilization(lq: LqData, N: int) -> StabilizationReport:
    if abs(np.linalg.det(lq.R)) <= 1e-14 * max(1.0, np.max(np.abs(lq.R), initial=0.0)):
        return StabilizationReport([], [], np.inf, False, singular=True,
                                   message="singular OCP: det R = 0, adjoint output map undefined")
    gains, costs, failure = riccati(lq, N)
    if failure:
        return StabilizationReport(gains, costs, np.inf, False, message=failure)
    rho = float(np.max(np.abs(np.linalg.eigvals(lq.A + lq.B @ gains[0]))))
    return StabilizationReport(gains, costs, rho, rho < 1.0)


def _rank(M) -> int:
    sv = np.linalg.svd(np.atleast_2d(M), compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > RANK_TOL * sv[0]))


def controllability_matrix(A, B) -> np.ndarray:
    A = np.atleast_2d(A)
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def check_nstep_reachability(lq: LqData) -> bool:
    return _rank(controllability_matrix(lq.A, lq.B)) == lq.n_x


def check_adjoint_observability(lq: LqData) -> bool:
    """Observability of ``(A', B')``; the transpose of the reachability test."""
    A, C = lq.A.T, lq.B.T
    blocks = [C]
    for _ in range(lq.n_x - 1):
        blocks.append(blocks[-1] @ A)
    return _rank(np.vstack(blocks)) == lq.n_x


# --- adjoint boundary analysis ---------------------------------------------

@dataclass
class AdjointPropagation:
    terminal: np.ndarray
    lam: np.ndarray             # (N+1, n_x), lam[N] = terminal
    u: np.ndarray               # (N, n_u) input deviations from the output map
    distance: np.ndarray        # |lam_k - lam_bar|_2 per k
    initial_gap: float          # |lam_0 - lam_bar|_2


@dataclass
class AdjointReport:
    fixed_point: np.ndarray
    fixed_point_unique: bool
    observable: bool
    fixed_point_error: float    # |fixed_point - lam_bar|_inf
    from_zero: AdjointPropagation
    from_steady: AdjointPropagation


def propagate_adjoint(lq: LqData, terminal, N: int, lam_bar=None) -> AdjointPropagation:
    """Run ``lam_k = A' lam_{k+1} + q`` backward at the steady state.

    Input deviations come from stationarity with the adjoint of the
    dynamics row they enter: ``du_k = -R^{-1} (B' lam_{k+1} + r)``.
    """
    if N < 1:
        raise ContractError("N must be >= 1")
    lam = np.empty((N + 1, lq.n_x))
    lam[N] = np.asarray(terminal, dtype=float)
    for k in range(N - 1, -1, -1):
        lam[k] = lq.A.T @ lam[k + 1] + lq.q
    u = -np.linalg.solve(lq.R, (lam[1:] @ lq.B + lq.r).T).T
    ref = np.zeros(lq.n_x) if lam_bar is None else np.asarray(lam_bar, dtype=float)
    dist = np.linalg.norm(lam - ref, axis=1)
    return AdjointPropagation(lam[N].copy(), lam, u, dist, float(dist[0]))


def adjoint_boundary_analysis(lq: LqData, s: SteadyState, N: int) -> AdjointReport:
    if abs(np.linalg.det(lq.R)) <= 1e-14:
        raise ContractError("singular OCP: det R = 0")
    M = np.eye(lq.n_x) - lq.A.T
    unique = _rank(M) == lq.n_x
    fp = np.linalg.lstsq(M, lq.q, rcond=None)[0]
    return AdjointReport(
        fixed_point=fp, fixed_point_unique=unique, observable=check_adjoint_observability(lq),
        fixed_point_error=float(np.max(np.abs(fp - s.lam))),
        from_zero=propagate_adjoint(lq, np.zeros(lq.n_x), N, s.lam),
        from_steady=propagate_adjoint(lq, s.lam, N, s.lam),
    )


# --- dense LQ-OCP --------------------------------------------------------------

@dataclass
class LqSolution:
    x: np.ndarray       # (N+1, n_x) deviations
    u: np.ndarray       # (N, n_u) deviations
    lam: np.ndarray     # (N+1, n_x)
    mu: np.ndarray      # (N+1, n_g); stage N carries only state_rows
    status: str


def solve_lq_ocp(lq: LqData, x0, N: int, state_rows: Optional[tuple] = None,
                 constrained: bool = True) -> LqSolution:
    """Solve the LQ-OCP as one dense QP with the same row layout as ``ocp``."""
    nx, nu = lq.n_x, lq.n_u
    st = nx + nu
    n = N * st + nx
    x0 = np.asarray(x0, dtype=float).reshape(nx)
    W = np.block([[lq.Q, lq.S], [lq.S.T, lq.R]])
    H = np.zeros((n, n))
    c = np.zeros(n)
    for k in range(N):
        H[k * st:(k + 1) * st, k * st:(k + 1) * st] = W
        c[k * st:k * st + nx] = lq.q
        c[k * st + nx:(k + 1) * st] = lq.r
    H[N * st:, N * st:] = lq.P_N
    c[N * st:] = lq.p_N
    # initial row x_hat - x_0 = 0, dynamics rows A x + B u - x+ = 0
    A_eq = np.zeros((nx * (N + 1), n))
    b_eq = np.zeros(nx * (N + 1))
    A_eq[:nx, :nx] = -np.eye(nx)
    b_eq[:nx] = -x0
    for k in range(N):
        r = nx * (k + 1)
        A_eq[r:r + nx, k * st:k * st + nx] = lq.A
        A_eq[r:r + nx, k * st + nx:(k + 1) * st] = lq.B
        A_eq[r:r + nx, (k + 1) * st:(k + 1) * st + nx] = -np.eye(nx)
    ng = lq.g_bar.size
    srows = np.asarray(state_rows if state_rows is not None else (), dtype=int)
    if constrained and ng:
        n_in = N * ng + srows.size
        A_in = np.zeros((n_in, n))
        b_in = np.zeros(n_in)
        for k in range(N):
            A_in[k * ng:(k + 1) * ng, k * st:k * st + nx] = lq.C
            A_in[k * ng:(k + 1) * ng, k * st + nx:(k + 1) * st] = lq.D
            b_in[k * ng:(k + 1) * ng] = -lq.g_bar
        A_in[N * ng:, N * st:] = lq.C[srows]
        b_in[N * ng:] = -lq.g_bar[srows]
    else:
        A_in, b_in = None, None
    res = solve_qp(H, c, A_eq, b_eq, A_in, b_in)
    z = res.z
    xs = np.stack([z[k * st:k * st + nx] for k in range(N + 1)])
    us = np.stack([z[k * st + nx:(k + 1) * st] for k in range(N)])
    mu = np.zeros((N + 1, ng))
    if constrained and ng:
        mu[:N] = res.mu[:N * ng].reshape(N, ng)
        mu[N, srows] = res.mu[N * ng:]
    return LqSolution(xs, us, res.lam.reshape(N + 1, nx), mu, res.status)


def dense_qp_gain(lq: LqData, N: int) -> np.ndarray:
    """First-step feedback gain of the unconstrained finite-horizon LQ problem, one QP per basis state."""
    base = LqData(lq.A, lq.B, np.zeros((0, lq.n_x)), np.zeros((0, lq.n_u)), lq.Q, lq.S, lq.R,
                  np.zeros(lq.n_x), np.zeros(lq.n_u), lq.P_N, np.zeros(lq.n_x))
    cols = []
    for i in range(lq.n_x):
        e = np.zeros(lq.n_x)
        e[i] = 1.0
        sol = solve_lq_ocp(base, e, N, constrained=False)
        if sol.status != "optimal":
            raise ContractError(f"dense LQ QP returned {sol.status}")
        cols.append(sol.u[0])
    return np.stack(cols, axis=1)


def prediction_mismatch(model: PlantModel, s: SteadyState, scheme: SchemeConfig, N: int, x0,
                        settings=None) -> float:
    """``|xi_LQ - xi|_2`` between the LQ-OCP and the full OCP primal-dual trajectories from ``x0``.

    Returns ``nan`` when the full OCP does not converge or the QP fails.
    """
    x0 = np.asarray(x0, dtype=float)
    sol = solve_ocp(model, scheme, N, x0, settings=settings)
    data = build_lq(model, s, scheme)
    approx = solve_lq_ocp(data, x0 - s.x, N, model.state_rows)
    if not sol.converged or approx.status != "optimal":
        return float("nan")
    full = np.concatenate([sol.x.ravel(), sol.u.ravel(), sol.lam.ravel()])
    lin = np.concatenate([(approx.x + s.x).ravel(), (approx.u + s.u).ravel(), approx.lam.ravel()])
    return float(np.linalg.norm(full - lin))
