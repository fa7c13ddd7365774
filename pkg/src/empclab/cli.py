"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 invalid configuration, 3 solver failure.
Artifacts go to ``--out`` (default: ``$EMPCLAB_OUT`` or ``./empclab-out``).
CSV files carry a header row; JSON summaries are validated against the
schemas shipped in ``empclab/schemas``. Wall-clock data is kept out of the
artifacts and written to a sidecar ``<command>.log``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from . import empc, lq, model, ocp, sop
from . import horizon as hz
from .model import ContractError
from .nlp import NlpSettings

COMMANDS = ("steady", "solve", "simulate", "lqcheck", "horizon", "report")
OUT_ENV = "EMPCLAB_OUT"
EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3

log = logging.getLogger("empclab")


class ConfigError(ValueError):
    pass


class SolverFailure(RuntimeError):
    pass


@dataclass
class RunConfig:
    model: str = "reactor"
    scheme: str = "gradcorr"
    horizon: int = 10
    x0: list = field(default_factory=lambda: [0.2, 0.8])
    steps: int = 200
    settings: dict = field(default_factory=dict)
    grid_spacing: float = 0.05
    rho: float = hz.DEFAULT_RHO
    rho_plain: float = 1e-1
    n_cl: int = hz.DEFAULT_NCL
    n_max: int = hz.DEFAULT_NMAX
    curve_spacing: float = 0.5
    curve_horizons: list = field(default_factory=lambda: list(range(1, 16)))
    sweep_horizons: list = field(default_factory=lambda: list(range(4, 16)))
    multistart: int = 16
    seed: int = 0
    jobs: int = 0
    out_dir: str = ""
    steady_file: str = ""

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**data)

    def nlp_settings(self) -> NlpSettings:
        try:
            return NlpSettings(**self.settings)
        except (TypeError, ContractError) as exc:
            raise ConfigError(f"invalid solver settings: {exc}") from None

    def validate(self):
        if self.model not in model.MODELS:
            raise ConfigError(f"unknown model {self.model!r}")
        try:
            ocp.Scheme(self.scheme)
        except ValueError:
            raise ConfigError(f"unknown scheme {self.scheme!r}") from None
        checks = [
            (isinstance(self.horizon, int) and self.horizon >= 1, "horizon must be an integer >= 1"),
            (isinstance(self.steps, int) and self.steps >= 1, "steps must be an integer >= 1"),
            (isinstance(self.n_cl, int) and self.n_cl >= 1, "ncl must be an integer >= 1"),
            (isinstance(self.n_max, int) and self.n_max >= 1, "nmax must be an integer >= 1"),
            (self.grid_spacing > 0 and self.curve_spacing > 0, "grid spacings must be positive"),
            (self.rho > 0 and self.rho_plain > 0, "rho must be positive"),
            (isinstance(self.multistart, int) and self.multistart >= 1, "multistart must be >= 1"),
            (isinstance(self.jobs, int) and self.jobs >= 0, "jobs must be >= 0"),
            (all(isinstance(n, int) and n >= 1 for n in self.curve_horizons + self.sweep_horizons),
             "horizon lists must hold integers >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        m = model.get_model(self.model)
        x0 = np.asarray(self.x0, dtype=float)
        if x0.shape != (m.n_x,) or not np.all(np.isfinite(x0)):
            raise ConfigError(f"x0 must hold {m.n_x} finite numbers")
        if m.bounds is not None and not m.bounds.contains_state(x0):
            raise ConfigError("x0 lies outside the state box")
        self.nlp_settings()
        return self

    @property
    def workers(self) -> int:
        return self.jobs or (os.cpu_count() or 1)

    def output_dir(self) -> Path:
        return Path(self.out_dir or os.environ.get(OUT_ENV) or "empclab-out")


# --- output helpers ------------------------------------------------------------

def _schema(name: str) -> dict:
    return json.loads(resources.files("empclab").joinpath("schemas", f"{name}.schema.json").read_text())


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path: Path, payload: dict, schema: str) -> dict:
    payload = _clean(payload)
    jsonschema.validate(payload, _schema(schema))
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload


def write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if v == math.inf:
            return "inf"
        return repr(v)
    return v


def _state_names(m) -> list:
    if m.name == "reactor":
        return ["x_A", "x_B"]
    return [f"x{i}" for i in range(m.n_x)]


def _input_names(m) -> list:
    return ["u"] if m.n_u == 1 else [f"u{i}" for i in range(m.n_u)]


# --- commands -------------------------------------------------------------------

def _steady(cfg: RunConfig, m, settings) -> sop.SteadyState:
    if cfg.steady_file:
        try:
            return sop.SteadyState.from_dict(json.loads(Path(cfg.steady_file).read_text()))
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load steady state: {exc}") from None
    try:
        return sop.solve_sop(m, settings, multistart=cfg.multistart, seed=cfg.seed)
    except sop.SteadyStateError as exc:
        raise SolverFailure(str(exc)) from None


def _steady_payload(m, s: sop.SteadyState) -> dict:
    rep = sop.verify_sop_kkt(m, s)
    out = s.to_dict()
    out.update(model=m.name, lambda_unique=rep.lambda_unique,
               kkt={"steady": rep.steady, "adjoint": rep.adjoint, "stationarity": rep.stationarity,
                    "complementarity": rep.complementarity})
    return out


def cmd_steady(cfg, m, settings, out: Path):
    s = _steady(cfg, m, settings)
    payload = write_json(out / "steady.json", _steady_payload(m, s), "steady")
    print(f"x_bar={payload['x_bar']} u_bar={payload['u_bar']} lambda_bar={payload['lambda_bar']} "
          f"mu_bar={payload['mu_bar']} l_bar={payload['l_bar']}")
    return EXIT_OK


def cmd_solve(cfg, m, settings, out: Path):
    s = _steady(cfg, m, settings)
    scheme = ocp.SchemeConfig(cfg.scheme, s)
    sol = ocp.solve_ocp(m, scheme, cfg.horizon, cfg.x0, settings=settings)
    xn, un = _state_names(m), _input_names(m)
    header = (["k"] + xn + un + [f"lambda_{n[2:] if n.startswith('x_') else n}" for n in xn]
              + [f"mu{j}" for j in range(m.n_g)] + ["stage_cost"])
    rows = []
    for k in range(cfg.horizon + 1):
        u = sol.u[k] if k < cfg.horizon else [""] * m.n_u
        cost = float(m.l(sol.x[k], sol.u[k])) if k < cfg.horizon else ""
        rows.append([k, *sol.x[k], *u, *sol.lam[k], *sol.mu[k], cost])
    write_csv(out / "solve.csv", header, rows)
    write_json(out / "solve.json", {
        "model": m.name, "scheme": scheme.kind.value, "horizon": cfg.horizon, "x0": cfg.x0,
        "status": sol.status.value, "V_N": sol.objective, "iterations": sol.iterations,
        "message": sol.message, "residuals": sol.el.summary() if sol.el else None,
    }, "solve")
    print(f"status={sol.status.value} V_N={sol.objective:.10g} u0={sol.u[0].tolist()}")
    if not sol.converged:
        print(f"solver failure ({sol.status.value}): {sol.message}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def cmd_simulate(cfg, m, settings, out: Path):
    s = _steady(cfg, m, settings)
    scheme = ocp.SchemeConfig(cfg.scheme, s)
    tr = empc.simulate_closed_loop(m, scheme, cfg.horizon, cfg.x0, cfg.steps, settings)
    header = ["i"] + _state_names(m) + _input_names(m) + ["V_N", "stage_cost"]
    rows = []
    for i in range(tr.x.shape[0]):
        if i < tr.steps:
            rows.append([i, *tr.x[i], *tr.u[i], tr.values[i], tr.stage_costs[i]])
        else:
            rows.append([i, *tr.x[i]] + [""] * (m.n_u + 2))
    write_csv(out / "simulate.csv", header, rows)
    conv = empc.convergence_step(tr, s)
    payload = write_json(out / "simulate.json", {
        "model": m.name, "scheme": scheme.kind.value, "horizon": cfg.horizon, "x0": cfg.x0,
        "steps": cfg.steps, "complete": tr.complete, "aborted_at": tr.aborted_at, "message": tr.message,
        "eventual_deviation": empc.eventual_deviation(tr, s) if tr.complete else None,
        "final_deviation": empc.final_deviation(tr, s), "convergence_step": conv,
    }, "simulate")
    print(f"complete={tr.complete} eventual_deviation={payload['eventual_deviation']} convergence_step={conv}")
    if not tr.complete:
        print(tr.message, file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def _lq_payload(m, s, cfg) -> tuple:
    scheme = ocp.SchemeConfig(cfg.scheme, s)
    try:
        data = lq.build_lq(m, s, scheme)
    except ContractError as exc:
        raise SolverFailure(str(exc)) from None
    rep = lq.check_local_stabilization(data, cfg.horizon)
    adj = lq.adjoint_boundary_analysis(data, s, cfg.horizon)
    payload = {
        "model": m.name, "scheme": scheme.kind.value, "horizon": cfg.horizon,
        "A": data.A, "B": data.B, "Q": data.Q, "S": data.S, "R": data.R, "q": data.q, "r": data.r,
        "p_N": data.p_N, "gain": rep.K0 if rep.gains and rep.gains[0] is not None else None,
        "spectral_radius": rep.spectral_radius if math.isfinite(rep.spectral_radius) else None,
        "stabilizing": rep.passed, "singular": rep.singular, "message": rep.message,
        "reachable": lq.check_nstep_reachability(data),
        "adjoint": {"fixed_point": adj.fixed_point, "fixed_point_unique": adj.fixed_point_unique,
                    "observable": adj.observable, "gap_from_zero": adj.from_zero.initial_gap,
                    "gap_from_steady": adj.from_steady.initial_gap},
    }
    return payload, adj


def cmd_lqcheck(cfg, m, settings, out: Path):
    s = _steady(cfg, m, settings)
    payload, adj = _lq_payload(m, s, cfg)
    payload = write_json(out / "lqcheck.json", payload, "lqcheck")
    names = [n[2:] if n.startswith("x_") else n for n in _state_names(m)]
    header = (["k"] + [f"lam_zero_{n}" for n in names] + [f"lam_steady_{n}" for n in names]
              + [f"du_zero{j}" for j in range(m.n_u)] + [f"du_steady{j}" for j in range(m.n_u)])
    rows = []
    for k in range(cfg.horizon + 1):
        dz = adj.from_zero.u[k] if k < cfg.horizon else [""] * m.n_u
        ds = adj.from_steady.u[k] if k < cfg.horizon else [""] * m.n_u
        rows.append([k, *adj.from_zero.lam[k], *adj.from_steady.lam[k], *dz, *ds])
    write_csv(out / "lqcheck_adjoint.csv", header, rows)
    print(f"A={payload['A']}\nB={payload['B']}\ngain={payload['gain']}\n"
          f"spectral_radius={payload['spectral_radius']} stabilizing={payload['stabilizing']}\n"
          f"reachable={payload['reachable']}")
    return EXIT_OK


def _grid(cfg, m, spacing=None) -> hz.SampleGrid:
    return hz.SampleGrid.for_model(m, spacing or cfg.grid_spacing)


def _horizon_map(cfg, m, s, settings, kind: str, rho: Optional[float] = None) -> hz.HorizonMap:
    grid = _grid(cfg, m)
    if kind == ocp.Scheme.TERMINAL.value:
        return hz.horizon_map_terminal(m, s, grid, cfg.n_max, settings, jobs=cfg.workers)
    return hz.horizon_map_closed_loop(m, s, kind, grid, rho or cfg.rho, cfg.n_cl, cfg.n_max,
                                           settings, jobs=cfg.workers)


def _write_map(out: Path, m, hm: hz.HorizonMap, name: str, extra: Optional[dict] = None) -> dict:
    names = [f"x0_{n[2:]}" if n.startswith("x_") else f"x0_{n}" for n in _state_names(m)]
    write_csv(out / f"{name}.csv", names + ["N"], hm.rows())
    payload = hm.summary()
    payload.update(model=m.name, grid=hm.grid.descriptor, **(extra or {}))
    return write_json(out / f"{name}.json", payload, "horizon")


def cmd_horizon(cfg, m, settings, out: Path):
    s = _steady(cfg, m, settings)
    kind = ocp.Scheme(cfg.scheme).value
    hm = _horizon_map(cfg, m, s, settings, kind)
    extra = {}
    if kind == ocp.Scheme.PLAIN.value:
        pts = _grid(cfg, m, cfg.curve_spacing).points
        curve = hz.rho_curve(m, s, kind, pts, cfg.curve_horizons, cfg.n_cl, settings, jobs=cfg.workers)
        write_csv(out / "rho_curve_plain.csv", ["N", "rho"], curve)
        extra["rho_curve"] = [{"N": n, "rho": r} for n, r in curve]
    payload = _write_map(out, m, hm, f"horizon_{kind}", extra)
    print(f"scheme={kind} aggregate={payload['aggregate']} infeasible={payload['infeasible']} "
          f"unresolved={payload['unresolved_samples']}")
    return EXIT_OK


def deviation_sweep(m, s, x0, horizons, steps, settings):
    out = []
    scheme = ocp.SchemeConfig(ocp.Scheme.PLAIN, s)
    for N in horizons:
        tr = empc.simulate_closed_loop(m, scheme, N, x0, steps, settings)
        if not tr.complete:
            raise SolverFailure(f"closed loop aborted for N={N}: {tr.message}")
        out.append((int(N), empc.eventual_deviation(tr, s)))
    return out


def fit_exponential(points):
    """Least-squares fit ``d = a exp(b N)`` on log scale; returns ``(a, b)``."""
    N = np.array([p[0] for p in points], dtype=float)
    d = np.array([p[1] for p in points], dtype=float)
    b, log_a = np.polyfit(N, np.log(d), 1)
    return float(np.exp(log_a)), float(b)


def cmd_report(cfg, m, settings, out: Path):
    s = _steady(cfg, m, settings)
    steady_payload = write_json(out / "steady.json", _steady_payload(m, s), "steady")
    lq_payload, _ = _lq_payload(m, s, cfg)
    lq_payload = write_json(out / "lqcheck.json", lq_payload, "lqcheck")

    maps = {}
    for kind, rho in (("terminal", None), ("plain", cfg.rho_plain), ("gradcorr", cfg.rho)):
        log.info("horizon map for %s", kind)
        maps[kind] = _horizon_map(cfg, m, s, settings, kind, rho)
        _write_map(out, m, maps[kind], f"horizon_{kind}")

    sweep = deviation_sweep(m, s, cfg.x0, cfg.sweep_horizons, cfg.n_cl, settings)
    write_csv(out / "deviation_plain.csv", ["N", "eventual_deviation"], sweep)
    a, b = fit_exponential(sweep)
    order = hz.ordering_check(maps["terminal"], maps["gradcorr"], maps["plain"], s)

    def loop_dev(kind, N):
        if N == hz.INF:
            return "n/a"
        tr = empc.simulate_closed_loop(m, ocp.SchemeConfig(kind, s), int(N), cfg.x0, cfg.n_cl, settings)
        return f"{empc.eventual_deviation(tr, s):.3g}" if tr.complete else "aborted"

    rows = [
        {"scheme": "terminal", "label": "(i)", "minimal_horizon": maps["terminal"].aggregate,
         "criterion": f"min-time to x_bar, N_max={cfg.n_max}",
         "eventual_deviation": loop_dev("terminal", maps["terminal"].aggregate)},
        {"scheme": "plain", "label": "(ii)", "minimal_horizon": maps["plain"].aggregate,
         "criterion": f"closed loop ends within rho={cfg.rho_plain:g}",
         "eventual_deviation": f"{a:.3g}*exp({b:.3g}*N)"},
        {"scheme": "gradcorr", "label": "(iii)", "minimal_horizon": maps["gradcorr"].aggregate,
         "criterion": f"closed loop ends within rho={cfg.rho:g}",
         "eventual_deviation": loop_dev("gradcorr", maps["gradcorr"].aggregate)},
    ]
    for r in rows:
        r["minimal_horizon"] = None if r["minimal_horizon"] == hz.INF else int(r["minimal_horizon"])
    write_csv(out / "table.csv", ["scheme", "label", "minimal_horizon", "criterion", "eventual_deviation"],
              [[r["scheme"], r["label"], "inf" if r["minimal_horizon"] is None else r["minimal_horizon"],
                r["criterion"], r["eventual_deviation"]] for r in rows])
    write_json(out / "report.json", {
        "model": m.name, "steady": steady_payload, "lq": lq_payload, "rows": rows,
        "deviation_sweep": [{"N": n, "deviation": d} for n, d in sweep],
        "deviation_fit": {"prefactor": a, "rate": b},
        "ordering": {"holds": order.holds, "compared": order.compared, "violations": order.violations},
    }, "report")
    for r in rows:
        print(f"{r['label']:6s} {r['scheme']:9s} N={r['minimal_horizon']} deviation={r['eventual_deviation']}")
    return EXIT_OK


HANDLERS = {"steady": cmd_steady, "solve": cmd_solve, "simulate": cmd_simulate,
            "lqcheck": cmd_lqcheck, "horizon": cmd_horizon, "report": cmd_report}


# --- parsing --------------------------------------------------------------------

def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file; explicit flags override it")
    common.add_argument("--model", help="registered model name (default reactor)")
    common.add_argument("--out", dest="out_dir", help=f"output directory (default ${OUT_ENV} or ./empclab-out)")
    common.add_argument("--steady", dest="steady_file", help="reuse a steady.json instead of re-solving")
    common.add_argument("--seed", type=int)
    common.add_argument("--multistart", type=int)
    common.add_argument("--jobs", type=int, help="worker processes for grid sweeps (0 = all cores)")
    common.add_argument("--tol", type=float, help="KKT tolerance")
    common.add_argument("--max-iter", type=int, help="SQP iteration cap")
    common.add_argument("-v", "--verbose", action="store_true")

    scheme = argparse.ArgumentParser(add_help=False)
    scheme.add_argument("--scheme", choices=[k.value for k in ocp.Scheme])
    scheme.add_argument("--horizon", type=int)

    p = argparse.ArgumentParser(prog="empclab", description="Economic MPC terminal-scheme laboratory.")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.add_parser("steady", parents=[common], help="solve the steady-state problem")
    sp = sub.add_parser("solve", parents=[common, scheme], help="solve one finite-horizon OCP")
    sp.add_argument("--x0", type=_floats)
    sp = sub.add_parser("simulate", parents=[common, scheme], help="run the receding-horizon loop")
    sp.add_argument("--x0", type=_floats)
    sp.add_argument("--steps", type=int)
    sub.add_parser("lqcheck", parents=[common, scheme], help="LQ stabilization and adjoint analysis")
    sp = sub.add_parser("horizon", parents=[common], help="minimal horizon map over a grid")
    sp.add_argument("--scheme", choices=[k.value for k in ocp.Scheme])
    sp.add_argument("--grid-spacing", type=float)
    sp.add_argument("--rho", type=float)
    sp.add_argument("--ncl", dest="n_cl", type=int)
    sp.add_argument("--nmax", dest="n_max", type=int)
    sp.add_argument("--curve-spacing", type=float)
    sp.add_argument("--curve-horizons", type=_ints)
    sp = sub.add_parser("report", parents=[common], help="steady, LQ, horizon maps and deviation sweep")
    sp.add_argument("--grid-spacing", type=float)
    sp.add_argument("--rho", type=float)
    sp.add_argument("--rho-plain", type=float)
    sp.add_argument("--ncl", dest="n_cl", type=int)
    sp.add_argument("--nmax", dest="n_max", type=int)
    sp.add_argument("--x0", type=_floats)
    sp.add_argument("--sweep-horizons", type=_ints)
    return p


def config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if getattr(args, "config", None) else RunConfig()
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            setattr(cfg, f.name, v)
    if getattr(args, "tol", None) is not None:
        cfg.settings = {**cfg.settings, "tol": args.tol}
    if getattr(args, "max_iter", None) is not None:
        cfg.settings = {**cfg.settings, "max_iter": args.max_iter}
    return cfg.validate()


def run_command(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv or argv[0] not in COMMANDS:
        if argv and argv[0] in ("-h", "--help"):
            parser.print_help()
            return EXIT_OK
        parser.print_usage(sys.stderr)
        print(f"empclab: expected one of {', '.join(COMMANDS)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        m = model.get_model(cfg.model)
        settings = cfg.nlp_settings()
        out = cfg.output_dir()
        out.mkdir(parents=True, exist_ok=True)
    except (ConfigError, ContractError, TypeError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    start = time.time()
    try:
        code = HANDLERS[args.command](cfg, m, settings, out)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        code = EXIT_SOLVER
    with (out / f"{args.command}.log").open("w") as fh:
        fh.write(f"started {time.strftime('%Y-%m-%dT%H:%M:%S', time.localtime(start))}\n"
                 f"elapsed {time.time() - start:.3f}s\nexit {code}\n"
                 f"config {json.dumps(dataclasses.asdict(cfg), sort_keys=True)}\n")
    return code


def main() -> None:
    sys.exit(run_command())
