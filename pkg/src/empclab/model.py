"""Plant models: dynamics, stage cost, path constraints and their derivatives.

A :class:`PlantModel` bundles plain callables acting on 1-D numpy arrays.
Path constraints follow the ``g(x, u) <= 0`` convention. All evaluators are
pure, so one model instance may be shared by many solvers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

FD_STEP = 1e-6
DERIVATIVE_RTOL = 1e-5


class ContractError(ValueError):
    """Raised when an argument violates a documented precondition."""


@dataclass(frozen=True)
class BoxBounds:
    x_lower: np.ndarray
    x_upper: np.ndarray
    u_lower: np.ndarray
    u_upper: np.ndarray

    def __post_init__(self):
        for name in ("x_lower", "x_upper", "u_lower", "u_upper"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if self.x_lower.shape != self.x_upper.shape or self.u_lower.shape != self.u_upper.shape:
            raise ContractError("lower/upper bound shapes differ")
        if np.any(self.x_lower > self.x_upper) or np.any(self.u_lower > self.u_upper):
            raise ContractError("lower bound exceeds upper bound")

    @property
    def n_x(self) -> int:
        return self.x_lower.size

    @property
    def n_u(self) -> int:
        return self.u_lower.size

    def contains_state(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.x_lower - tol) and np.all(x <= self.x_upper + tol))


class BoxConstraints:
    """Box bounds written as ``2 (n_x + n_u)`` affine rows of ``g``.

    Row order is fixed: x lower, x upper, u lower, u upper.
    """

    def __init__(self, bounds: BoxBounds):
        self.bounds = bounds
        nx, nu = bounds.n_x, bounds.n_u
        self.n_g = 2 * (nx + nu)
        gx = np.zeros((self.n_g, nx))
        gu = np.zeros((self.n_g, nu))
        gx[:nx] = -np.eye(nx)
        gx[nx:2 * nx] = np.eye(nx)
        gu[2 * nx:2 * nx + nu] = -np.eye(nu)
        gu[2 * nx + nu:] = np.eye(nu)
        self._gx = gx
        self._gu = gu

    @property
    def state_rows(self) -> tuple:
        return tuple(range(2 * self.bounds.n_x))

    def g(self, x, u):
        b = self.bounds
        return np.concatenate([b.x_lower - x, x - b.x_upper, b.u_lower - u, u - b.u_upper])

    def g_x(self, x, u):
        return self._gx.copy()

    def g_u(self, x, u):
        return self._gu.copy()


@dataclass(frozen=True)
class PlantModel:
    """Discrete-time plant ``x+ = f(x, u)`` with stage cost ``l`` and constraints ``g <= 0``.

    ``hess(x, u, lam, mu, cost_weight)`` returns ``(L_xx, L_xu, L_uu)`` of
    ``cost_weight * l + lam' f + mu' g``. When omitted, it is obtained by
    central differences of the first derivatives.
    """

    name: str
    n_x: int
    n_u: int
    n_g: int
    f: Callable
    l: Callable
    g: Callable
    f_x: Callable
    f_u: Callable
    l_x: Callable
    l_u: Callable
    g_x: Callable
    g_u: Callable
    hess: Optional[Callable] = None
    state_rows: tuple = ()
    bounds: Optional[BoxBounds] = None
    metadata: dict = field(default_factory=dict)

    def check_dims(self, x, u):
        x = np.asarray(x, dtype=float).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(-1)
        if x.size != self.n_x:
            raise ContractError(f"state has dimension {x.size}, expected {self.n_x}")
        if u.size != self.n_u:
            raise ContractError(f"input has dimension {u.size}, expected {self.n_u}")
        return x, u

    def lagrangian_hessian(self, x, u, lam, mu, cost_weight: float = 1.0):
        if self.hess is not None:
            return self.hess(x, u, lam, mu, cost_weight)
        return _fd_lagrangian_hessian(self, x, u, lam, mu, cost_weight)


def eval_dynamics(model: PlantModel, x, u) -> np.ndarray:
    x, u = model.check_dims(x, u)
    return np.asarray(model.f(x, u), dtype=float)


def eval_stage_cost(model: PlantModel, x, u) -> float:
    x, u = model.check_dims(x, u)
    return float(model.l(x, u))


def eval_constraints(model: PlantModel, x, u) -> np.ndarray:
    x, u = model.check_dims(x, u)
    return np.asarray(model.g(x, u), dtype=float)


def _lagrangian_gradient(model, x, u, lam, mu, w):
    gx = w * model.l_x(x, u) + model.f_x(x, u).T @ lam + model.g_x(x, u).T @ mu
    gu = w * model.l_u(x, u) + model.f_u(x, u).T @ lam + model.g_u(x, u).T @ mu
    return np.concatenate([gx, gu])


def _fd_lagrangian_hessian(model, x, u, lam, mu, w, h=FD_STEP):
    nx, nu = model.n_x, model.n_u
    z = np.concatenate([x, u])
    H = np.zeros((nx + nu, nx + nu))
    for i in range(nx + nu):
        e = np.zeros(nx + nu)
        e[i] = h
        zp, zm = z + e, z - e
        gp = _lagrangian_gradient(model, zp[:nx], zp[nx:], lam, mu, w)
        gm = _lagrangian_gradient(model, zm[:nx], zm[nx:], lam, mu, w)
        H[:, i] = (gp - gm) / (2 * h)
    H = 0.5 * (H + H.T)
    return H[:nx, :nx], H[:nx, nx:], H[nx:, nx:]


def _central_jacobian(fun, z, h=FD_STEP):
    z = np.asarray(z, dtype=float)
    cols = []
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        cols.append((np.atleast_1d(fun(z + e)) - np.atleast_1d(fun(z - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def sample_interior(model: PlantModel, rng: np.random.Generator, margin: float = 0.05):
    """Draw a random ``(x, u)`` strictly inside the model box (standard normal without one)."""
    if model.bounds is None:
        return rng.standard_normal(model.n_x), rng.standard_normal(model.n_u)
    b = model.bounds

    def draw(lo, hi):
        span = hi - lo
        return lo + span * (margin + (1 - 2 * margin) * rng.random(lo.size))

    return draw(b.x_lower, b.x_upper), draw(b.u_lower, b.u_upper)


@dataclass
class DerivativeReport:
    errors: dict
    tol: float
    samples: int

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def _rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def derivative_check(model: PlantModel, samples: int = 100, seed: int = 0,
                     tol: float = DERIVATIVE_RTOL) -> DerivativeReport:
    """Compare every analytic derivative with central differences at random interior points."""
    if samples < 1:
        raise ContractError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    nx = model.n_x
    errors = dict.fromkeys(("f_x", "f_u", "l_x", "l_u", "g_x", "g_u", "L_xx", "L_xu", "L_uu"), 0.0)
    for _ in range(samples):
        x, u = sample_interior(model, rng)
        lam = rng.standard_normal(nx)
        mu = rng.random(model.n_g)
        pairs = {
            "f_x": (model.f_x(x, u), _central_jacobian(lambda s: model.f(s, u), x)),
            "f_u": (model.f_u(x, u), _central_jacobian(lambda s: model.f(x, s), u)),
            "l_x": (model.l_x(x, u), _central_jacobian(lambda s: model.l(s, u), x)),
            "l_u": (model.l_u(x, u), _central_jacobian(lambda s: model.l(x, s), u)),
            "g_x": (model.g_x(x, u), _central_jacobian(lambda s: model.g(s, u), x)),
            "g_u": (model.g_u(x, u), _central_jacobian(lambda s: model.g(x, s), u)),
        }
        if model.hess is not None:
            Lxx, Lxu, Luu = model.hess(x, u, lam, mu, 1.0)
            fxx, fxu, fuu = _fd_lagrangian_hessian(model, x, u, lam, mu, 1.0)
            pairs.update(L_xx=(Lxx, fxx), L_xu=(Lxu, fxu), L_uu=(Luu, fuu))
        for key, (exact, approx) in pairs.items():
            errors[key] = max(errors[key], _rel_err(np.reshape(exact, np.shape(approx)), approx))
    return DerivativeReport(errors=errors, tol=tol, samples=samples)


# --- reactor benchmark -----------------------------------------------------
# x = [x_A, x_B], u scalar. The x_B balance uses -0.01 u x_B: with this sign
# [0.5, 0.5] is a fixed point at u = 12 and lambda_bar = [-100, -200].

def _reactor_f(x, u):
    xa, xb = x
    v = u[0]
    return np.array([xa + 0.01 * v * (1.0 - xa) - 0.12 * xa,
                     xb - 0.01 * v * xb + 0.12 * xa])


def _reactor_f_x(x, u):
    v = u[0]
    return np.array([[0.88 - 0.01 * v, 0.0],
                     [0.12, 1.0 - 0.01 * v]])


def _reactor_f_u(x, u):
    return np.array([[0.01 * (1.0 - x[0])], [-0.01 * x[1]]])


def _reactor_l(x, u):
    v = u[0]
    return -2.0 * v * x[1] + 0.5 * v + 0.1 * (v - 12.0) ** 2


def _reactor_l_x(x, u):
    return np.array([0.0, -2.0 * u[0]])


def _reactor_l_u(x, u):
    return np.array([-2.0 * x[1] + 0.5 + 0.2 * (u[0] - 12.0)])


def _reactor_hess(x, u, lam, mu, w=1.0):
    Lxx = np.zeros((2, 2))
    Lxu = np.array([[-0.01 * lam[0]], [-2.0 * w - 0.01 * lam[1]]])
    Luu = np.array([[0.2 * w]])
    return Lxx, Lxu, Luu


REACTOR_BOUNDS = BoxBounds(x_lower=[0.0, 0.0], x_upper=[1.0, 1.0], u_lower=[0.0], u_upper=[20.0])


def reactor_model() -> PlantModel:
    box = BoxConstraints(REACTOR_BOUNDS)
    return PlantModel(
        name="reactor", n_x=2, n_u=1, n_g=box.n_g,
        f=_reactor_f, l=_reactor_l, g=box.g,
        f_x=_reactor_f_x, f_u=_reactor_f_u, l_x=_reactor_l_x, l_u=_reactor_l_u,
        g_x=box.g_x, g_u=box.g_u, hess=_reactor_hess,
        state_rows=box.state_rows, bounds=REACTOR_BOUNDS,
    )


MODELS = {"reactor": reactor_model}


def get_model(name: str) -> PlantModel:
    try:
        return MODELS[name]()
    except KeyError:
        raise ContractError(f"unknown model {name!r}; known: {sorted(MODELS)}") from None
