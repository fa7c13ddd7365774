"""Minimal horizon estimation over a grid of initial states.

The terminal-equality scheme uses a minimum-time sweep (binary search over
N, relying on monotone feasibility). The other schemes search N upward
until the closed loop ends inside a ball around ``x_bar``.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Optional, Sequence

import numpy as np

from .empc import final_deviation, simulate_closed_loop
from .model import ContractError, PlantModel
from .nlp import NlpSettings
from .ocp import Scheme, SchemeConfig, feasibility_report
from .sop import SteadyState

INF = math.inf
DEFAULT_RHO = 1e-3
DEFAULT_NCL = 200
DEFAULT_NMAX = 30


@dataclass
class SampleGrid:
    points: np.ndarray          # (M, n_x), fixed order
    descriptor: str = "explicit"

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.shape[0] < 1:
            raise ContractError("grid must contain at least one sample")

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def uniform(cls, lower, upper, spacing: float = 0.05) -> "SampleGrid":
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if not spacing > 0:
            raise ContractError("spacing must be positive")
        axes = []
        for lo, hi in zip(lower, upper):
            count = int(round((hi - lo) / spacing)) + 1
            axes.append(np.linspace(lo, hi, count))
        # first coordinate varies slowest
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.reshape(-1) for m in mesh], axis=1)
        return cls(pts, f"uniform spacing={spacing:g} over {lower.tolist()}..{upper.tolist()}")

    @classmethod
    def for_model(cls, model: PlantModel, spacing: float = 0.05) -> "SampleGrid":
        if model.bounds is None:
            raise ContractError("model has no box bounds")
        return cls.uniform(model.bounds.x_lower, model.bounds.x_upper, spacing)

    def check_inside(self, model: PlantModel, tol: float = 1e-12):
        if model.bounds is None:
            return
        for p in self.points:
            if not model.bounds.contains_state(p, tol):
                raise ContractError(f"sample {p.tolist()} lies outside the state box")

    def same_as(self, other: "SampleGrid") -> bool:
        return self.points.shape == other.points.shape and bool(np.all(self.points == other.points))


@dataclass
class HorizonMap:
    scheme: str
    grid: SampleGrid
    values: list                # int per sample, or math.inf
    unresolved: list = field(default_factory=list)   # per sample: horizons whose solve did not settle
    caps: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.values) != len(self.grid):
            raise ContractError("one value per grid sample required")

    @property
    def finite(self) -> list:
        return [v for v in self.values if v != INF]

    @property
    def aggregate(self):
        fin = self.finite
        return max(fin) if fin else INF

    @property
    def infeasible_count(self) -> int:
        return sum(1 for v in self.values if v == INF)

    def rows(self):
        for p, v in zip(self.grid.points, self.values):
            yield (*p.tolist(), v)

    def summary(self) -> dict:
        return {"scheme": self.scheme, "aggregate": _json_value(self.aggregate),
                "samples": len(self.grid), "infeasible": self.infeasible_count,
                "unresolved_samples": sum(1 for u in self.unresolved if u), "caps": self.caps}


def _json_value(v):
    return None if v == INF else int(v)


def _pool_map(fn, items, jobs: int):
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


# --- terminal equality: minimum time ------------------------------------------

@dataclass
class MinTimeResult:
    value: float                # int-valued or inf
    unresolved: list
    probes: int


def _is_steady(x0, s: SteadyState) -> bool:
    return bool(np.all(np.abs(np.asarray(x0, dtype=float) - s.x) <= 1e-12))


def min_time_search(model: PlantModel, s: SteadyState, x0, N_max: int = DEFAULT_NMAX,
                    settings: Optional[NlpSettings] = None) -> MinTimeResult:
    """Binary search for the smallest feasible horizon of the terminal-equality OCP.

    A probe whose restoration ends without a clear verdict counts as
    infeasible, so unresolved solves can only increase the result.
    """
    if N_max < 1:
        raise ContractError("N_max must be >= 1")
    if _is_steady(x0, s):
        return MinTimeResult(0, [], 0)
    scheme = SchemeConfig(Scheme.TERMINAL, s)
    unresolved, probes = [], 0

    def feasible(N):
        nonlocal probes
        probes += 1
        rep = feasibility_report(model, scheme, N, x0, settings)
        if rep.status not in ("converged", "infeasible-detected"):
            unresolved.append(N)
        return rep.feasible

    if not feasible(N_max):
        return MinTimeResult(INF, unresolved, probes)
    lo, hi = 0, N_max           # lo infeasible (x0 != x_bar), hi feasible
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return MinTimeResult(hi, unresolved, probes)


def min_time_to_steady(model: PlantModel, s: SteadyState, x0, N_max: int = DEFAULT_NMAX,
                       settings: Optional[NlpSettings] = None):
    return min_time_search(model, s, x0, N_max, settings).value


def _min_time_worker(x0, model, s, N_max, settings):
    return min_time_search(model, s, x0, N_max, settings)


def horizon_map_terminal(model: PlantModel, s: SteadyState, grid: SampleGrid, N_max: int = DEFAULT_NMAX,
                         settings: Optional[NlpSettings] = None, jobs: int = 1) -> HorizonMap:
    grid.check_inside(model)
    fn = partial(_min_time_worker, model=model, s=s, N_max=N_max, settings=settings)
    results = _pool_map(fn, list(grid.points), jobs)
    return HorizonMap(Scheme.TERMINAL.value, grid, [r.value for r in results],
                      [r.unresolved for r in results], {"N_max": N_max})


# --- closed-loop search ----------------------------------------------------------

@dataclass
class ClosedLoopSearch:
    value: float
    unresolved: list
    deviations: dict            # N -> final distance to x_bar (complete runs only)


def closed_loop_search(model: PlantModel, s: SteadyState, scheme, x0, rho: float = DEFAULT_RHO,
                       N_cl: int = DEFAULT_NCL, N_max: int = DEFAULT_NMAX,
                       settings: Optional[NlpSettings] = None) -> ClosedLoopSearch:
    if not rho > 0:
        raise ContractError("rho must be positive")
    if N_cl < 1 or N_max < 1:
        raise ContractError("N_cl and N_max must be >= 1")
    cfg = scheme if isinstance(scheme, SchemeConfig) else SchemeConfig(scheme, s)
    if cfg.kind is Scheme.TERMINAL:
        raise ContractError("closed-loop search is meant for schemes without a terminal constraint")
    unresolved, devs = [], {}
    for N in range(1, N_max + 1):
        trace = simulate_closed_loop(model, cfg, N, x0, N_cl, settings)
        if not trace.complete:
            unresolved.append(N)
            continue
        devs[N] = final_deviation(trace, s)
        if devs[N] <= rho:
            return ClosedLoopSearch(N, unresolved, devs)
    return ClosedLoopSearch(INF, unresolved, devs)


def min_horizon_closed_loop(model: PlantModel, s: SteadyState, scheme, x0, rho: float = DEFAULT_RHO,
                            N_cl: int = DEFAULT_NCL, N_max: int = DEFAULT_NMAX,
                            settings: Optional[NlpSettings] = None):
    return closed_loop_search(model, s, scheme, x0, rho, N_cl, N_max, settings).value


def _closed_loop_worker(x0, model, s, scheme, rho, N_cl, N_max, settings):
    return closed_loop_search(model, s, scheme, x0, rho, N_cl, N_max, settings)


def horizon_map_closed_loop(model: PlantModel, s: SteadyState, scheme, grid: SampleGrid,
                            rho: float = DEFAULT_RHO, N_cl: int = DEFAULT_NCL, N_max: int = DEFAULT_NMAX,
                            settings: Optional[NlpSettings] = None, jobs: int = 1) -> HorizonMap:
    grid.check_inside(model)
    kind = Scheme(scheme.kind if isinstance(scheme, SchemeConfig) else scheme)
    fn = partial(_closed_loop_worker, model=model, s=s, scheme=kind, rho=rho, N_cl=N_cl,
                 N_max=N_max, settings=settings)
    results = _pool_map(fn, list(grid.points), jobs)
    return HorizonMap(kind.value, grid, [r.value for r in results], [r.unresolved for r in results],
                      {"rho": rho, "N_cl": N_cl, "N_max": N_max})


# --- comparisons -------------------------------------------------------------------

@dataclass
class OrderingReport:
    holds: bool
    violations: list            # (index, point, N_gradcorr, N_terminal)
    excluded: list              # indices skipped (steady samples)
    compared: int
    plain_values: Optional[list] = None


def ordering_check(terminal: HorizonMap, gradcorr: HorizonMap, plain: Optional[HorizonMap] = None,
                   s: Optional[SteadyState] = None) -> OrderingReport:
    """Per sample, the gradient-corrected horizon must not exceed the terminal-equality one.

    Samples at ``x_bar`` are excluded: the terminal map reports 0 there while
    closed-loop searches start at N = 1.
    """
    if not terminal.grid.same_as(gradcorr.grid) or (plain is not None and not plain.grid.same_as(terminal.grid)):
        raise ContractError("maps do not share a grid")
    violations, excluded = [], []
    for j, (p, nt, ng) in enumerate(zip(terminal.grid.points, terminal.values, gradcorr.values)):
        if (s is not None and _is_steady(p, s)) or nt == 0:
            excluded.append(j)
            continue
        if ng > nt:
            violations.append((j, p.tolist(), ng, nt))
    return OrderingReport(not violations, violations, excluded, len(terminal.values) - len(excluded),
                          None if plain is None else list(plain.values))


def _final_dev_worker(x0, model, scheme, N, N_cl, settings):
    trace = simulate_closed_loop(model, scheme, N, x0, N_cl, settings)
    if not trace.complete:
        return INF
    return final_deviation(trace, scheme.steady)


def rho_curve(model: PlantModel, s: SteadyState, scheme, points: Sequence, horizons: Sequence[int],
              N_cl: int = DEFAULT_NCL, settings: Optional[NlpSettings] = None, jobs: int = 1):
    """Smallest ball radius reached by every listed initial state, per horizon: ``[(N, rho), ...]``."""
    cfg = scheme if isinstance(scheme, SchemeConfig) else SchemeConfig(scheme, s)
    out = []
    pts = [np.asarray(p, dtype=float) for p in points]
    for N in horizons:
        fn = partial(_final_dev_worker, model=model, scheme=cfg, N=N, N_cl=N_cl, settings=settings)
        out.append((int(N), float(max(_pool_map(fn, pts, jobs)))))
    return out
