"""Finite-horizon OCP for the three terminal schemes, adjoint recovery and Euler-Lagrange residuals.

Decision vector (full simultaneous transcription)::

    z = [x_0, u_0, x_1, u_1, ..., x_{N-1}, u_{N-1}, x_N]

Equality rows, in order: ``x_hat - x_0`` (multiplier ``lam_0``),
``f(x_k, u_k) - x_{k+1}`` (multiplier ``lam_{k+1}``) and, for the terminal
scheme, ``x_N - x_bar``. Writing the initial row as ``x_hat - x_0`` makes
``lam_0`` obey the same backward recursion as every other adjoint.
Path constraints hold for k = 0..N-1 and, at k = N, only the state rows.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import ContractError, PlantModel
from .nlp import Nlp, NlpResult, NlpSettings, Status, minimize_violation, solve_nlp
from .sop import SteadyState


class Scheme(str, enum.Enum):
    TERMINAL = "terminal"   # (i)   V_f = 0,            X_f = {x_bar}
    PLAIN = "plain"         # (ii)  V_f = 0,            X_f = R^n
    GRADCORR = "gradcorr"   # (iii) V_f = lam_bar' x,   X_f = R^n

    @property
    def label(self) -> str:
        return {"terminal": "(i)", "plain": "(ii)", "gradcorr": "(iii)"}[self.value]


@dataclass(frozen=True)
class SchemeConfig:
    kind: Scheme
    steady: Optional[SteadyState] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Scheme(self.kind))
        if self.kind is Scheme.TERMINAL and (self.steady is None or self.steady.x is None):
            raise ContractError("terminal scheme needs x_bar")
        if self.kind is Scheme.GRADCORR and (self.steady is None or self.steady.lam is None):
            raise ContractError("gradient-correcting scheme needs lambda_bar")


def terminal_penalty(scheme: SchemeConfig, xN):
    """Value and gradient of ``V_f`` at ``xN``."""
    xN = np.asarray(xN, dtype=float)
    if scheme.kind is Scheme.GRADCORR:
        lam = scheme.steady.lam
        return float(lam @ xN), lam.copy()
    return 0.0, np.zeros_like(xN)


class OcpLayout:
    """Index bookkeeping for the transcription."""

    def __init__(self, model: PlantModel, scheme: SchemeConfig, N: int):
        if N < 1:
            raise ContractError("horizon N must be >= 1")
        self.model, self.scheme, self.N = model, scheme, N
        nx, nu = model.n_x, model.n_u
        self.nx, self.nu, self.ng = nx, nu, model.n_g
        self.stride = nx + nu
        self.n = N * self.stride + nx
        self.srows = np.asarray(model.state_rows, dtype=int)
        self.n_term = nx if scheme.kind is Scheme.TERMINAL else 0
        self.n_eq = nx * (N + 1) + self.n_term
        self.n_ineq = N * self.ng + self.srows.size

    def xs(self, z):
        return np.stack([z[k * self.stride:k * self.stride + self.nx] for k in range(self.N + 1)])

    def us(self, z):
        return np.stack([z[k * self.stride + self.nx:(k + 1) * self.stride] for k in range(self.N)])

    def pack(self, x, u):
        z = np.empty(self.n)
        for k in range(self.N):
            z[k * self.stride:k * self.stride + self.nx] = x[k]
            z[k * self.stride + self.nx:(k + 1) * self.stride] = u[k]
        z[self.N * self.stride:] = x[self.N]
        return z

    def split_lam(self, lam):
        adj = lam[:self.nx * (self.N + 1)].reshape(self.N + 1, self.nx)
        term = lam[self.nx * (self.N + 1):] if self.n_term else None
        return adj, term

    def pack_lam(self, adj, term=None):
        out = np.zeros(self.n_eq)
        out[:self.nx * (self.N + 1)] = np.asarray(adj).reshape(-1)
        if self.n_term and term is not None:
            out[self.nx * (self.N + 1):] = term
        return out

    def split_mu(self, mu):
        full = np.zeros((self.N + 1, self.ng))
        full[:self.N] = mu[:self.N * self.ng].reshape(self.N, self.ng)
        full[self.N, self.srows] = mu[self.N * self.ng:]
        return full

    def pack_mu(self, mu_full):
        mu_full = np.asarray(mu_full)
        return np.concatenate([mu_full[:self.N].reshape(-1), mu_full[self.N, self.srows]])


def _u_ref(model, scheme):
    if scheme.steady is not None:
        return scheme.steady.u
    return np.zeros(model.n_u)


def build_ocp_nlp(model: PlantModel, scheme: SchemeConfig, N: int, x0) -> tuple[Nlp, OcpLayout]:
    lay = OcpLayout(model, scheme, N)
    nx, nu, ng, st = lay.nx, lay.nu, lay.ng, lay.stride
    x_hat = np.asarray(x0, dtype=float).reshape(-1)
    if x_hat.size != nx or not np.all(np.isfinite(x_hat)):
        raise ContractError("x0 must be a finite state vector")
    u_ref = _u_ref(model, scheme)
    srows = lay.srows
    x_bar = scheme.steady.x if scheme.kind is Scheme.TERMINAL else None

    def stage(z, k):
        i = k * st
        return z[i:i + nx], z[i + nx:i + st]

    def objective(z):
        val = 0.0
        grad = np.zeros(lay.n)
        for k in range(N):
            x, u = stage(z, k)
            i = k * st
            val += model.l(x, u)
            grad[i:i + nx] = model.l_x(x, u)
            grad[i + nx:i + st] = model.l_u(x, u)
        vf, dvf = terminal_penalty(scheme, z[N * st:])
        grad[N * st:] = dvf
        return val + vf, grad

    eye = np.eye(nx)

    def equalities(z):
        h = np.empty(lay.n_eq)
        J = np.zeros((lay.n_eq, lay.n))
        h[:nx] = x_hat - z[:nx]
        J[:nx, :nx] = -eye
        for k in range(N):
            x, u = stage(z, k)
            r = nx * (k + 1)
            i = k * st
            h[r:r + nx] = model.f(x, u) - z[i + st:i + st + nx]
            J[r:r + nx, i:i + nx] = model.f_x(x, u)
            J[r:r + nx, i + nx:i + st] = model.f_u(x, u)
            J[r:r + nx, i + st:i + st + nx] = -eye
        if lay.n_term:
            h[-nx:] = z[N * st:] - x_bar
            J[-nx:, N * st:] = eye
        return h, J

    def inequalities(z):
        g = np.empty(lay.n_ineq)
        J = np.zeros((lay.n_ineq, lay.n))
        for k in range(N):
            x, u = stage(z, k)
            r, i = k * ng, k * st
            g[r:r + ng] = model.g(x, u)
            J[r:r + ng, i:i + nx] = model.g_x(x, u)
            J[r:r + ng, i + nx:i + st] = model.g_u(x, u)
        xN = z[N * st:]
        g[N * ng:] = np.asarray(model.g(xN, u_ref))[srows]
        J[N * ng:, N * st:] = np.asarray(model.g_x(xN, u_ref))[srows]
        return g, J

    def hessian(z, lam, mu, w=1.0):
        H = np.zeros((lay.n, lay.n))
        adj, _ = lay.split_lam(lam)
        mus = lay.split_mu(mu)
        for k in range(N):
            x, u = stage(z, k)
            i = k * st
            Lxx, Lxu, Luu = model.lagrangian_hessian(x, u, adj[k + 1], mus[k], w)
            H[i:i + nx, i:i + nx] = Lxx
            H[i:i + nx, i + nx:i + st] = Lxu
            H[i + nx:i + st, i:i + nx] = np.transpose(Lxu)
            H[i + nx:i + st, i + nx:i + st] = Luu
        if np.any(mus[N] != 0.0):
            Lxx, _, _ = model.lagrangian_hessian(z[N * st:], u_ref, np.zeros(nx), mus[N], 0.0)
            H[N * st:, N * st:] = Lxx
        return H

    # Restoration relaxes the terminal equality and state rows only; rows that
    # touch inputs alone stay hard, so the bounds keep the elastic problem well posed.
    soft_eq = np.zeros(lay.n_eq, bool)
    if lay.n_term:
        soft_eq[-nx:] = True
    soft_ineq = np.zeros(lay.n_ineq, bool)
    for k in range(N):
        soft_ineq[k * ng + srows] = True
    soft_ineq[N * ng:] = True
    nlp = Nlp(n=lay.n, objective=objective, n_eq=lay.n_eq, equalities=equalities,
              n_ineq=lay.n_ineq, inequalities=inequalities, hessian=hessian,
              soft_eq=soft_eq, soft_ineq=soft_ineq)
    return nlp, lay


@dataclass
class ElReport:
    dynamics: np.ndarray        # per k = 0..N-1, plus initial condition at index 0 folded in
    adjoint: np.ndarray         # per k = 0..N-1
    stationarity: np.ndarray    # per k = 0..N-1
    initial: float
    boundary: float

    @property
    def max_residual(self) -> float:
        return float(max(np.max(self.dynamics), np.max(self.adjoint), np.max(self.stationarity),
                         self.initial, self.boundary))

    def summary(self) -> dict:
        return {"dynamics": float(np.max(self.dynamics)), "adjoint": float(np.max(self.adjoint)),
                "stationarity": float(np.max(self.stationarity)), "initial": self.initial,
                "boundary": self.boundary, "max": self.max_residual}


@dataclass
class OcpSolution:
    x: np.ndarray           # (N+1, n_x)
    u: np.ndarray           # (N, n_u)
    lam: np.ndarray         # (N+1, n_x)
    mu: np.ndarray          # (N+1, n_g); stage N carries only state rows
    objective: float
    status: Status
    N: int
    x0: np.ndarray
    scheme: Scheme
    terminal_multiplier: Optional[np.ndarray] = None
    iterations: int = 0
    nlp: Optional[NlpResult] = None
    el: Optional[ElReport] = None
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status is Status.CONVERGED

    @property
    def feasible(self) -> bool:
        return self.status is not Status.INFEASIBLE


def _default_guess(model, scheme, N, x0):
    u_bar = _u_ref(model, scheme)
    x = [np.asarray(x0, dtype=float)]
    for _ in range(N):
        x.append(np.asarray(model.f(x[-1], u_bar), dtype=float))
    return np.stack(x), np.tile(u_bar, (N, 1))


def initial_guess(model: PlantModel, scheme: SchemeConfig, N: int, x0,
                  warm: Optional[OcpSolution] = None):
    """Primal-dual starting point ``(z, lam, mu)`` for the transcription."""
    lay = OcpLayout(model, scheme, N)
    if warm is not None and warm.N == N and warm.scheme is scheme.kind:
        x = warm.x.copy()
        x[0] = x0
        z = lay.pack(x, warm.u)
        lam = lay.pack_lam(warm.lam, warm.terminal_multiplier)
        mu = lay.pack_mu(warm.mu)
        return z, lam, mu
    x, u = _default_guess(model, scheme, N, x0)
    return lay.pack(x, u), None, None


def solve_ocp(model: PlantModel, scheme: SchemeConfig, N: int, x0,
              warm: Optional[OcpSolution] = None, settings: Optional[NlpSettings] = None) -> OcpSolution:
    """Solve the OCP; adjoints are read from the dynamics-row multipliers."""
    settings = settings or NlpSettings()
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    nlp, lay = build_ocp_nlp(model, scheme, N, x0)
    z0, lam0, mu0 = initial_guess(model, scheme, N, x0, warm)
    res = solve_nlp(nlp, z0, settings, lam0, mu0)
    adj, term = lay.split_lam(res.lam)
    sol = OcpSolution(
        x=lay.xs(res.z), u=lay.us(res.z), lam=adj.copy(), mu=lay.split_mu(res.mu),
        objective=float(res.objective), status=res.status, N=N, x0=x0, scheme=scheme.kind,
        terminal_multiplier=None if term is None else term.copy(),
        iterations=res.iterations, nlp=res, message=res.message,
    )
    if sol.converged:
        sol.el = euler_lagrange_residual(model, scheme, sol)
    return sol


def euler_lagrange_residual(model: PlantModel, scheme: SchemeConfig, sol: OcpSolution) -> ElReport:
    """Residuals of the discrete Euler-Lagrange equations and the scheme's boundary condition."""
    N = sol.N
    x, u, lam, mu = sol.x, sol.u, sol.lam, sol.mu
    dyn = np.empty(N)
    adj = np.empty(N)
    stat = np.empty(N)
    for k in range(N):
        dyn[k] = np.max(np.abs(x[k + 1] - model.f(x[k], u[k])))
        adj[k] = np.max(np.abs(lam[k] - (model.f_x(x[k], u[k]).T @ lam[k + 1] + model.l_x(x[k], u[k])
                                         + model.g_x(x[k], u[k]).T @ mu[k])))
        stat[k] = np.max(np.abs(model.f_u(x[k], u[k]).T @ lam[k + 1] + model.l_u(x[k], u[k])
                                + model.g_u(x[k], u[k]).T @ mu[k]))
    initial = float(np.max(np.abs(x[0] - sol.x0)))
    u_ref = _u_ref(model, scheme)
    gxN = np.asarray(model.g_x(x[N], u_ref))
    srows = list(model.state_rows)
    mu_term = gxN[srows].T @ mu[N, srows] if srows else np.zeros(model.n_x)
    if scheme.kind is Scheme.TERMINAL:
        boundary = float(np.max(np.abs(x[N] - scheme.steady.x)))
    elif scheme.kind is Scheme.PLAIN:
        boundary = float(np.max(np.abs(lam[N] - mu_term)))
    else:
        boundary = float(np.max(np.abs(lam[N] - scheme.steady.lam - mu_term)))
    return ElReport(dyn, adj, stat, initial, boundary)


@dataclass
class FeasibilityReport:
    feasible: bool
    violation: float
    status: str = ""
    z: Optional[np.ndarray] = field(default=None, repr=False)


def feasibility_report(model: PlantModel, scheme: SchemeConfig, N: int, x0,
                       settings: Optional[NlpSettings] = None, tol: Optional[float] = None) -> FeasibilityReport:
    """Run the elastic restoration on the OCP; dynamics and input rows stay exact."""
    settings = settings or NlpSettings()
    tol = settings.infeasibility_tol if tol is None else tol
    nlp, lay = build_ocp_nlp(model, scheme, N, x0)
    z0, _, _ = initial_guess(model, scheme, N, x0)
    rest = minimize_violation(nlp, z0, settings)
    ok = rest.violation <= tol and rest.result.status is not Status.INFEASIBLE
    return FeasibilityReport(bool(ok), rest.violation, rest.result.status.value, rest.z)


def probe_feasibility(model: PlantModel, scheme: SchemeConfig, N: int, x0,
                      settings: Optional[NlpSettings] = None) -> bool:
    return feasibility_report(model, scheme, N, x0, settings).feasible
