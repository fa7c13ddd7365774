"""Dense SQP for small smooth NLPs.

Problem form::

    min f(z)  s.t.  h(z) = 0,  g(z) <= 0

with Lagrangian ``f + lam' h + mu' g`` and ``mu >= 0``. Subproblems are
strictly convex QPs on the null space of the linearized equalities, solved
by a dual active-set method (Goldfarb-Idnani). Globalization uses an l1
exact-penalty merit function with Armijo backtracking and a second-order
correction. Inconsistent linearizations trigger an elastic restoration
phase that minimizes a least-squares measure of the soft-constraint violation;
if that stalls above ``infeasibility_tol`` the problem is declared
infeasible.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from .model import ContractError

log = logging.getLogger(__name__)


class Status(str, enum.Enum):
    CONVERGED = "converged"
    INFEASIBLE = "infeasible-detected"
    ITERATION_LIMIT = "iteration-limit"


class EvaluationError(RuntimeError):
    """An evaluator returned a non-finite value."""


@dataclass
class Nlp:
    """Evaluators return value/derivative pairs.

    ``objective(z) -> (f, grad)``, ``equalities(z) -> (h, J_h)``,
    ``inequalities(z) -> (g, J_g)``, ``hessian(z, lam, mu, cost_weight)``
    returns the Lagrangian Hessian with the objective scaled by
    ``cost_weight``. ``soft_eq`` / ``soft_ineq`` mark rows the restoration
    phase may relax (default: all).
    """

    n: int
    objective: Callable
    n_eq: int = 0
    equalities: Optional[Callable] = None
    n_ineq: int = 0
    inequalities: Optional[Callable] = None
    hessian: Optional[Callable] = None
    soft_eq: Optional[np.ndarray] = None
    soft_ineq: Optional[np.ndarray] = None

    def eval_eq(self, z):
        if self.n_eq == 0:
            return np.zeros(0), np.zeros((0, self.n))
        h, J = self.equalities(z)
        return np.asarray(h, dtype=float), np.asarray(J, dtype=float).reshape(self.n_eq, self.n)

    def eval_ineq(self, z):
        if self.n_ineq == 0:
            return np.zeros(0), np.zeros((0, self.n))
        g, J = self.inequalities(z)
        return np.asarray(g, dtype=float), np.asarray(J, dtype=float).reshape(self.n_ineq, self.n)


@dataclass(frozen=True)
class NlpSettings:
    tol: float = 1e-8
    max_iter: int = 200
    hessian: str = "exact"  # "exact" | "bfgs"
    reg_floor: float = 1e-8
    armijo: float = 1e-4
    backtrack: float = 0.5
    penalty_margin: float = 1.0
    infeasibility_tol: float = 1e-6
    max_restorations: int = 5
    stall_window: int = 5
    stall_ratio: float = 0.9
    restoration_reg: float = 1e-8
    min_alpha: float = 1e-10

    def __post_init__(self):
        if not self.tol > 0:
            raise ContractError("tol must be positive")
        if self.max_iter < 1:
            raise ContractError("max_iter must be >= 1")
        if self.hessian not in ("exact", "bfgs"):
            raise ContractError("hessian must be 'exact' or 'bfgs'")


@dataclass
class NlpResult:
    z: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    objective: float
    stationarity: float
    feasibility: float
    complementarity: float
    status: Status
    iterations: int
    message: str = ""
    restorations: int = 0

    @property
    def converged(self) -> bool:
        return self.status is Status.CONVERGED

    @property
    def kkt_residual(self) -> float:
        return max(self.stationarity, self.feasibility, self.complementarity)


# --- QP ------------------------------------------------------------------

@dataclass
class QpResult:
    z: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    active: list
    status: str  # "optimal" | "infeasible" | "iteration-limit"
    eq_residual: float = 0.0


@dataclass
class _EqSpace:
    """Affine solution set of ``A z = b`` in least-squares sense, via SVD."""

    z_p: np.ndarray
    Z: np.ndarray
    U_r: np.ndarray
    s_r: np.ndarray
    Vt_r: np.ndarray
    residual: float


def _eq_space(A, b, n, rank_tol=1e-9) -> _EqSpace:
    if A.shape[0] == 0:
        return _EqSpace(np.zeros(n), np.eye(n), np.zeros((0, 0)), np.zeros(0), np.zeros((0, n)), 0.0)
    U, s, Vt = np.linalg.svd(A, full_matrices=True)
    rank = int(np.sum(s > rank_tol * max(1.0, s[0]))) if s.size else 0
    U_r, s_r, Vt_r = U[:, :rank], s[:rank], Vt[:rank]
    z_p = Vt_r.T @ ((U_r.T @ b) / s_r)
    residual = float(np.max(np.abs(A @ z_p - b))) if b.size else 0.0
    return _EqSpace(z_p, Vt[rank:].T, U_r, s_r, Vt_r, residual)


def _dual_active_set(G, a, C, d, tol=1e-11, max_iter=None):
    """Goldfarb-Idnani for ``min 1/2 y'Gy + a'y  s.t.  C y <= d`` with ``G`` positive definite.

    Returns ``(y, mu, active, status)``.
    """
    n = G.shape[0]
    m = C.shape[0]
    cho = sla.cho_factor(G, lower=True)
    y = -sla.cho_solve(cho, a) if n else np.zeros(0)
    mu = np.zeros(m)
    if m == 0:
        return y, mu, [], "optimal"
    if n == 0:
        ok = bool(np.all(d >= -tol * (1.0 + np.abs(d))))
        return y, mu, [], "optimal" if ok else "infeasible"
    Ginv = sla.cho_solve(cho, np.eye(n)) if n else np.zeros((0, 0))
    active: list = []
    u: list = []
    row_norm = np.max(np.abs(C), axis=1)
    max_iter = max_iter or 20 * (m + n + 10)
    it = 0
    while True:
        viol = (C @ y - d) / (1.0 + np.abs(d) + row_norm * np.max(np.abs(y), initial=0.0))
        viol[active] = -np.inf
        p = int(np.argmax(viol))
        if viol[p] <= tol:
            break
        u_p = 0.0
        n_p = -C[p]
        while True:
            it += 1
            if it > max_iter:
                mu[active] = u
                return y, mu, active, "iteration-limit"
            if active:
                N = -C[active].T
                GN = Ginv @ N
                M = N.T @ GN
                try:
                    r = sla.cho_solve(sla.cho_factor(M, lower=True), GN.T @ n_p)
                except np.linalg.LinAlgError:
                    r = np.linalg.lstsq(M, GN.T @ n_p, rcond=None)[0]
                step = Ginv @ n_p - GN @ r
            else:
                r = np.zeros(0)
                step = Ginv @ n_p
            t1, k = np.inf, -1
            for j, rj in enumerate(r):
                if rj > 1e-14:
                    ratio = u[j] / rj
                    if ratio < t1:
                        t1, k = ratio, j
            s_p = d[p] - C[p] @ y  # < 0 while violated
            curv = float(step @ n_p)
            if np.max(np.abs(step), initial=0.0) <= 1e-14 * (1.0 + np.max(np.abs(n_p))) or curv <= 1e-300:
                if not np.isfinite(t1):
                    mu[active] = u
                    return y, mu, active, "infeasible"
                u = [uj - t1 * rj for uj, rj in zip(u, r)]
                u_p += t1
                del active[k], u[k]
                continue
            t2 = -s_p / curv
            t = min(t1, t2)
            y = y + t * step
            u = [uj - t * rj for uj, rj in zip(u, r)]
            u_p += t
            if t2 <= t1:
                active.append(p)
                u.append(u_p)
                break
            del active[k], u[k]
    mu[active] = np.maximum(u, 0.0)
    return y, mu, active, "optimal"


def _solve_qp_space(H, c, space: _EqSpace, A_eq, A_in, b_in, eq_tol):
    n = c.size
    if space.residual > eq_tol:
        return QpResult(space.z_p, np.zeros(A_eq.shape[0]), np.zeros(A_in.shape[0]), [],
                        "infeasible", space.residual)
    Z = space.Z
    G = Z.T @ H @ Z
    G = 0.5 * (G + G.T)
    a = Z.T @ (H @ space.z_p + c)
    C = A_in @ Z
    d = b_in - A_in @ space.z_p
    try:
        y, mu, active, status = _dual_active_set(G, a, C, d)
    except np.linalg.LinAlgError:
        raise ContractError("QP Hessian is not positive definite on the equality null space") from None
    z = space.z_p + Z @ y
    lam = np.zeros(A_eq.shape[0])
    if A_eq.shape[0]:
        rhs = -(H @ z + c + A_in.T @ mu)
        lam = space.U_r @ ((space.Vt_r @ rhs) / space.s_r)
    return QpResult(z, lam, mu, sorted(active), status, space.residual)


def solve_qp(H, c, A_eq=None, b_eq=None, A_in=None, b_in=None, *, eq_tol: float = 1e-8) -> QpResult:
    """Solve ``min 1/2 z'Hz + c'z  s.t.  A_eq z = b_eq,  A_in z <= b_in``.

    ``H`` must be positive definite on the null space of ``A_eq``. Returned
    multipliers satisfy ``H z + c + A_eq' lam + A_in' mu = 0`` with ``mu >= 0``.
    Rank-deficient but consistent equalities are accepted; equality
    multipliers are then the minimum-norm choice.
    """
    H = np.asarray(H, dtype=float)
    c = np.asarray(c, dtype=float).reshape(-1)
    n = c.size
    if H.shape != (n, n):
        raise ContractError("H must be square and match c")
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_eq = np.zeros(0) if b_eq is None else np.atleast_1d(np.asarray(b_eq, dtype=float))
    A_in = np.zeros((0, n)) if A_in is None else np.atleast_2d(np.asarray(A_in, dtype=float))
    b_in = np.zeros(0) if b_in is None else np.atleast_1d(np.asarray(b_in, dtype=float))
    if A_eq.shape[1] != n or A_in.shape[1] != n or A_eq.shape[0] != b_eq.size or A_in.shape[0] != b_in.size:
        raise ContractError("constraint dimensions inconsistent")
    space = _eq_space(A_eq, b_eq, n)
    return _solve_qp_space(0.5 * (H + H.T), c, space, A_eq, A_in, b_in, eq_tol)


# --- SQP -----------------------------------------------------------------

def _regularize(H, Z, floor):
    """Shift ``H`` by ``tau I`` (tau doubled from ``floor``) until ``Z'HZ`` is positive definite."""
    H = 0.5 * (H + H.T)
    if Z.shape[1] == 0:
        return H, 0.0
    ev = np.linalg.eigvalsh(Z.T @ H @ Z)[0]
    if ev >= floor:
        return H, 0.0
    tau = floor
    while ev + tau < floor:
        tau *= 2.0
    return H + tau * np.eye(H.shape[0]), tau


def _kkt(gf, h, Jh, g, Jg, lam, mu):
    stat = gf + Jh.T @ lam + Jg.T @ mu
    s = float(np.max(np.abs(stat), initial=0.0))
    feas = max(float(np.max(np.abs(h), initial=0.0)), float(np.max(g, initial=0.0)), 0.0)
    comp = float(np.max(np.abs(mu * g), initial=0.0))
    comp = max(comp, float(-np.min(mu, initial=0.0)))
    return s, feas, comp


def _violation(h, g):
    return float(np.sum(np.abs(h)) + np.sum(np.maximum(g, 0.0)))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise EvaluationError("evaluator returned a non-finite value")


class _Evaluator:
    def __init__(self, problem: Nlp):
        self.p = problem

    def __call__(self, z):
        f, gf = self.p.objective(z)
        h, Jh = self.p.eval_eq(z)
        g, Jg = self.p.eval_ineq(z)
        gf = np.asarray(gf, dtype=float)
        _check_finite(np.atleast_1d(f), gf, h, Jh, g, Jg)
        return float(f), gf, h, Jh, g, Jg


def solve_nlp(problem: Nlp, initial_guess, settings: Optional[NlpSettings] = None,
              lam0=None, mu0=None, *, _restoration: bool = False) -> NlpResult:
    """Run SQP from ``initial_guess`` (optionally with warm multipliers).

    Never reports ``converged`` unless every KKT residual is below ``settings.tol``.
    """
    settings = settings or NlpSettings()
    z = np.array(initial_guess, dtype=float).reshape(-1)
    if z.size != problem.n:
        raise ContractError(f"initial guess has dimension {z.size}, expected {problem.n}")
    lam = np.zeros(problem.n_eq) if lam0 is None else np.array(lam0, dtype=float).reshape(-1)
    mu = np.zeros(problem.n_ineq) if mu0 is None else np.maximum(np.array(mu0, dtype=float).reshape(-1), 0.0)
    if lam.size != problem.n_eq or mu.size != problem.n_ineq:
        raise ContractError("warm-start multiplier dimensions inconsistent")

    evaluate = _Evaluator(problem)
    exact = settings.hessian == "exact" and problem.hessian is not None
    B = np.eye(problem.n)
    nu = 0.0
    restorations = 0
    stalls = 0
    f, gf, h, Jh, g, Jg = evaluate(z)
    it = 0
    message = ""
    feas_hist: list = []

    def result(status, msg=""):
        s, feas, comp = _kkt(gf, h, Jh, g, Jg, lam, mu)
        return NlpResult(z.copy(), lam.copy(), mu.copy(), f, s, feas, comp, status, it, msg, restorations)

    while True:
        s, feas, comp = _kkt(gf, h, Jh, g, Jg, lam, mu)
        if max(s, feas, comp) <= settings.tol:
            return result(Status.CONVERGED)
        if it >= settings.max_iter:
            return result(Status.ITERATION_LIMIT, message or "iteration limit reached")
        it += 1
        feas_hist.append(feas)
        w = settings.stall_window
        if (not _restoration and feas > settings.infeasibility_tol and len(feas_hist) > w
                and feas > settings.stall_ratio * feas_hist[-1 - w]
                and restorations < settings.max_restorations):
            # infeasibility is not shrinking: hand over to the restoration phase
            restorations += 1
            feas_hist.clear()
            rest = minimize_violation(problem, z, settings)
            z = rest.z
            f, gf, h, Jh, g, Jg = evaluate(z)
            if rest.violation > settings.infeasibility_tol:
                return result(Status.INFEASIBLE, f"restoration stalled at violation {rest.violation:.3e}")
            continue

        H = problem.hessian(z, lam, mu, 1.0) if exact else B
        space = _eq_space(Jh, -h, problem.n)
        H, _ = _regularize(np.asarray(H, dtype=float), space.Z, settings.reg_floor)
        qp = _solve_qp_space(H, gf, space, Jh, Jg, -g, settings.infeasibility_tol)

        if qp.status != "optimal":
            if _restoration or restorations >= settings.max_restorations:
                status = Status.INFEASIBLE if feas > settings.infeasibility_tol else Status.ITERATION_LIMIT
                return result(status, f"QP subproblem {qp.status}")
            restorations += 1
            rest = minimize_violation(problem, z, settings)
            if rest.violation > settings.infeasibility_tol:
                z = rest.z
                f, gf, h, Jh, g, Jg = evaluate(z)
                return result(Status.INFEASIBLE,
                              f"restoration stalled at violation {rest.violation:.3e}")
            z = rest.z
            f, gf, h, Jh, g, Jg = evaluate(z)
            continue

        d = qp.z
        # penalty just above the largest multiplier: an absolute margin would
        # swamp badly scaled objectives and reject every full step
        mult = float(np.max(np.abs(np.concatenate([qp.lam, qp.mu])), initial=0.0))
        nu = max(nu, (1.0 + settings.penalty_margin) * mult + 1e-8)
        viol0 = _violation(h, g)
        phi0 = f + nu * viol0
        D = float(gf @ d) - nu * viol0

        if np.max(np.abs(d), initial=0.0) <= 1e-15 * (1.0 + np.max(np.abs(z))):
            lam, mu = qp.lam, qp.mu
            stalls += 1
            if stalls > 3:
                if feas > settings.infeasibility_tol:
                    return result(Status.INFEASIBLE, "zero step at infeasible point")
                return result(Status.ITERATION_LIMIT, "zero step without KKT convergence")
            continue
        stalls = 0

        alpha = 1.0
        accepted = None
        while alpha >= settings.min_alpha:
            z_try = z + alpha * d
            try:
                trial = evaluate(z_try)
            except EvaluationError:
                alpha *= settings.backtrack
                continue
            phi = trial[0] + nu * _violation(trial[2], trial[4])
            if phi <= phi0 + settings.armijo * alpha * D + 1e-14 * (1.0 + abs(phi0)):
                accepted = (z_try, trial)
                break
            if alpha == 1.0:
                soc = _second_order_correction(problem, evaluate, z, d, Jh, Jg, trial, qp.active)
                if soc is not None:
                    z_soc, trial_soc = soc
                    phi_soc = trial_soc[0] + nu * _violation(trial_soc[2], trial_soc[4])
                    if phi_soc <= phi0 + settings.armijo * D + 1e-14 * (1.0 + abs(phi0)):
                        accepted = (z_soc, trial_soc)
                        break
            alpha *= settings.backtrack

        if accepted is None:
            message = "line search failed"
            if feas > settings.infeasibility_tol and not _restoration and restorations < settings.max_restorations:
                restorations += 1
                rest = minimize_violation(problem, z, settings)
                z = rest.z
                f, gf, h, Jh, g, Jg = evaluate(z)
                if rest.violation > settings.infeasibility_tol:
                    return result(Status.INFEASIBLE, f"restoration stalled at violation {rest.violation:.3e}")
                continue
            return result(Status.ITERATION_LIMIT, message)

        z_new, (f_new, gf_new, h_new, Jh_new, g_new, Jg_new) = accepted
        lam_new = lam + alpha * (qp.lam - lam)
        mu_new = mu + alpha * (qp.mu - mu)
        if not exact:
            B = _damped_bfgs(B, z_new - z,
                             (gf_new + Jh_new.T @ lam_new + Jg_new.T @ mu_new)
                             - (gf + Jh.T @ lam_new + Jg.T @ mu_new))
        z, lam, mu = z_new, lam_new, mu_new
        f, gf, h, Jh, g, Jg = f_new, gf_new, h_new, Jh_new, g_new, Jg_new


def _second_order_correction(problem, evaluate, z, d, Jh, Jg, trial, active):
    """Minimum-norm step restoring the linearized equalities and active inequalities at ``z + d``."""
    rows = [Jh] + ([Jg[active]] if active else [])
    vals = [trial[2]] + ([trial[4][active]] if active else [])
    J = np.vstack(rows)
    c = np.concatenate(vals)
    if J.shape[0] == 0:
        return None
    corr = np.linalg.lstsq(J, -c, rcond=1e-10)[0]
    z_soc = z + d + corr
    try:
        return z_soc, evaluate(z_soc)
    except EvaluationError:
        return None


def _damped_bfgs(B, s, y):
    Bs = B @ s
    sBs = float(s @ Bs)
    if sBs <= 1e-16:
        return B
    sy = float(s @ y)
    theta = 1.0 if sy >= 0.2 * sBs else 0.8 * sBs / (sBs - sy)
    r = theta * y + (1.0 - theta) * Bs
    return B - np.outer(Bs, Bs) / sBs + np.outer(r, r) / float(s @ r)


# --- restoration -----------------------------------------------------------

@dataclass
class Restoration:
    z: np.ndarray
    violation: float
    result: NlpResult


def minimize_violation(problem: Nlp, z0, settings: Optional[NlpSettings] = None) -> Restoration:
    """Elastic least-squares restoration.

    Solves ``min 1/2 (|p|^2 + t^2)`` subject to the hard rows and
    ``h_soft(z) = p``, ``g_soft(z) <= t``. The optimum is zero exactly when
    the original constraints are feasible. ``violation`` is the infinity
    norm of the original constraint violation at the final point.
    """
    settings = settings or NlpSettings()
    n = problem.n
    soft_eq = np.ones(problem.n_eq, bool) if problem.soft_eq is None else np.asarray(problem.soft_eq, bool)
    soft_in = np.ones(problem.n_ineq, bool) if problem.soft_ineq is None else np.asarray(problem.soft_ineq, bool)
    hard_eq, hard_in = ~soft_eq, ~soft_in
    se, si = int(soft_eq.sum()), int(soft_in.sum())
    he, hi = int(hard_eq.sum()), int(hard_in.sum())
    has_t = si > 0
    n_r = n + se + int(has_t)

    scale = 1.0

    def objective(w):
        v = w[n:]
        return 0.5 * scale * float(v @ v), np.concatenate([np.zeros(n), scale * v])

    def equalities(w):
        z, p = w[:n], w[n:n + se]
        h, J = problem.eval_eq(z)
        Jr = np.zeros((problem.n_eq, n_r))
        Jr[:, :n] = np.vstack([J[hard_eq], J[soft_eq]])
        Jr[he:, n:n + se] = -np.eye(se)
        return np.concatenate([h[hard_eq], h[soft_eq] - p]), Jr

    def inequalities(w):
        z = w[:n]
        g, J = problem.eval_ineq(z)
        Jr = np.zeros((problem.n_ineq, n_r))
        Jr[:, :n] = np.vstack([J[hard_in], J[soft_in]])
        vals = np.concatenate([g[hard_in], g[soft_in]])
        if has_t:
            Jr[hi:, -1] = -1.0
            vals[hi:] -= w[-1]
        return vals, Jr

    def hessian(w, lam_r, mu_r, cost_weight=1.0):
        # Exact curvature: the residual stays nonzero on infeasible problems, so
        # Gauss-Newton would only converge linearly there.
        lam = np.empty(problem.n_eq)
        lam[hard_eq], lam[soft_eq] = lam_r[:he], lam_r[he:]
        mu = np.empty(problem.n_ineq)
        mu[hard_in], mu[soft_in] = mu_r[:hi], mu_r[hi:]
        H = np.zeros((n_r, n_r))
        if problem.hessian is not None:
            H[:n, :n] = problem.hessian(w[:n], lam, mu, 0.0)
        H[:n, :n] += settings.restoration_reg * np.eye(n)
        H[n:, n:] = cost_weight * scale * np.eye(n_r - n)
        return H

    h0, _ = problem.eval_eq(z0)
    g0, _ = problem.eval_ineq(z0)
    w0 = np.concatenate([z0, h0[soft_eq], [max(float(np.max(g0[soft_in])), 0.0)] if has_t else []])
    # normalize by the squared violation of all rows (hard ones included) at
    # the start, never below the infeasibility tolerance; tolerances and the
    # regularization floor then act relative to that magnitude
    v0 = max(float(w0[n:] @ w0[n:]), float(np.max(np.abs(h0), initial=0.0)) ** 2,
             float(np.max(g0, initial=0.0)) ** 2, settings.infeasibility_tol ** 2)
    scale = 1.0 / v0
    rp = Nlp(n=n_r, objective=objective, n_eq=problem.n_eq, equalities=equalities,
             n_ineq=problem.n_ineq, inequalities=inequalities, hessian=hessian)
    rset = replace(settings, reg_floor=max(settings.reg_floor, settings.restoration_reg),
                   tol=min(settings.tol, 1e-10))
    res = solve_nlp(rp, w0, rset, _restoration=True)
    z = res.z[:n]
    h, _ = problem.eval_eq(z)
    g, _ = problem.eval_ineq(z)
    viol = max(float(np.max(np.abs(h), initial=0.0)), float(np.max(g, initial=0.0)), 0.0)
    return Restoration(z, viol, res)
