"""Steady-state optimization: ``min l(x, u)  s.t.  x = f(x, u),  g(x, u) <= 0``."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import qmc

from .model import PlantModel
from .nlp import Nlp, NlpSettings, solve_nlp

INTERIOR_TOL = 1e-8
RANK_TOL = 1e-8


class SteadyStateError(RuntimeError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class SteadyState:
    x: np.ndarray
    u: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    cost: float
    interior: bool
    iterations: int = 0
    start_index: int = 0

    def to_dict(self) -> dict:
        return {
            "x_bar": self.x.tolist(), "u_bar": self.u.tolist(),
            "lambda_bar": self.lam.tolist(), "mu_bar": self.mu.tolist(),
            "l_bar": self.cost, "interior": self.interior,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SteadyState":
        return cls(np.asarray(d["x_bar"], float), np.asarray(d["u_bar"], float),
                   np.asarray(d["lambda_bar"], float), np.asarray(d["mu_bar"], float),
                   float(d["l_bar"]), bool(d["interior"]))


def sop_problem(model: PlantModel) -> Nlp:
    nx, nu = model.n_x, model.n_u
    eye = np.eye(nx)

    def split(z):
        return z[:nx], z[nx:]

    def objective(z):
        x, u = split(z)
        return model.l(x, u), np.concatenate([model.l_x(x, u), model.l_u(x, u)])

    def equalities(z):
        x, u = split(z)
        return model.f(x, u) - x, np.hstack([model.f_x(x, u) - eye, model.f_u(x, u)])

    def inequalities(z):
        x, u = split(z)
        return model.g(x, u), np.hstack([model.g_x(x, u), model.g_u(x, u)])

    def hessian(z, lam, mu, w=1.0):
        x, u = split(z)
        Lxx, Lxu, Luu = model.lagrangian_hessian(x, u, lam, mu, w)
        return np.block([[Lxx, Lxu], [np.transpose(Lxu), Luu]])

    return Nlp(n=nx + nu, objective=objective, n_eq=nx, equalities=equalities,
               n_ineq=model.n_g, inequalities=inequalities, hessian=hessian)


def _starts(model: PlantModel, count: int, seed: int) -> np.ndarray:
    d = model.n_x + model.n_u
    if model.bounds is None:
        return np.random.default_rng(seed).standard_normal((count, d))
    b = model.bounds
    lo = np.concatenate([b.x_lower, b.u_lower])
    hi = np.concatenate([b.x_upper, b.u_upper])
    return qmc.scale(qmc.LatinHypercube(d=d, seed=seed).random(count), lo, hi)


def _to_steady(model, res, index) -> SteadyState:
    x, u = res.z[:model.n_x].copy(), res.z[model.n_x:].copy()
    g = np.asarray(model.g(x, u))
    return SteadyState(x=x, u=u, lam=res.lam.copy(), mu=res.mu.copy(), cost=float(res.objective),
                       interior=bool(np.all(g < -INTERIOR_TOL)), iterations=res.iterations,
                       start_index=index)


def solve_sop(model: PlantModel, settings: Optional[NlpSettings] = None, multistart: int = 16,
              seed: int = 0, warm: Optional[SteadyState] = None) -> SteadyState:
    """Best KKT point over Latin-hypercube starts; ties go to the lowest start index."""
    settings = settings or NlpSettings()
    problem = sop_problem(model)
    if warm is not None:
        res = solve_nlp(problem, np.concatenate([warm.x, warm.u]), settings, warm.lam, warm.mu)
        if res.converged:
            return _to_steady(model, res, 0)
    best = None
    diagnostics = []
    for i, z0 in enumerate(_starts(model, multistart, seed)):
        res = solve_nlp(problem, z0, settings)
        diagnostics.append({"start": i, "status": res.status.value, "objective": res.objective,
                            "kkt": res.kkt_residual, "message": res.message})
        if not res.converged:
            continue
        if best is None or res.objective < best[1].objective - 1e-9:
            best = (i, res)
    if best is None:
        raise SteadyStateError("no multistart run converged", diagnostics)
    return _to_steady(model, best[1], best[0])


@dataclass
class SopKktReport:
    steady: float
    adjoint: float
    stationarity: float
    complementarity: float
    lambda_unique: bool

    @property
    def max_residual(self) -> float:
        return max(self.steady, self.adjoint, self.stationarity, self.complementarity)


def verify_sop_kkt(model: PlantModel, s: SteadyState) -> SopKktReport:
    x, u, lam, mu = s.x, s.u, s.lam, s.mu
    r_steady = x - model.f(x, u)
    r_adj = lam - (model.f_x(x, u).T @ lam + model.l_x(x, u) + model.g_x(x, u).T @ mu)
    r_stat = model.f_u(x, u).T @ lam + model.l_u(x, u) + model.g_u(x, u).T @ mu
    comp = np.abs(mu * model.g(x, u))
    unique, _ = check_multiplier_uniqueness(model, s)
    return SopKktReport(
        steady=float(np.max(np.abs(r_steady))), adjoint=float(np.max(np.abs(r_adj))),
        stationarity=float(np.max(np.abs(r_stat))),
        complementarity=max(float(np.max(comp, initial=0.0)), float(-np.min(mu, initial=0.0))),
        lambda_unique=unique,
    )


@dataclass
class RankReport:
    singular_values: np.ndarray
    rank: int
    columns: int
    active_rows: list = field(default_factory=list)


def check_multiplier_uniqueness(model: PlantModel, s: SteadyState, active_tol: float = INTERIOR_TOL):
    """Full column rank of the stationarity Jacobian w.r.t. ``(lambda, mu_active)``."""
    x, u = s.x, s.u
    g = np.asarray(model.g(x, u))
    active = [int(j) for j in np.flatnonzero(g >= -active_tol)]
    top = np.hstack([model.f_x(x, u).T - np.eye(model.n_x), model.g_x(x, u)[active].T])
    bottom = np.hstack([model.f_u(x, u).T, model.g_u(x, u)[active].T])
    M = np.vstack([top, bottom])
    sv = np.linalg.svd(M, compute_uv=False)
    rank = int(np.sum(sv > RANK_TOL * max(1.0, sv[0]))) if sv.size else 0
    return rank == M.shape[1], RankReport(sv, rank, M.shape[1], active)
