#!/usr/bin/env python3
"""Eventual closed-loop deviation of the plain scheme versus horizon, with a log-linear fit.

Also writes the smallest ball radius reached from a coarse grid of initial states.
"""
import argparse
import csv
import os
from pathlib import Path

import numpy as np

from empclab.empc import eventual_deviation, simulate_closed_loop
from empclab.horizon import SampleGrid, rho_curve
from empclab.model import get_model
from empclab.ocp import SchemeConfig
from empclab.sop import solve_sop


def write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--x0", type=lambda t: [float(v) for v in t.split(",")], default=[0.2, 0.8])
    p.add_argument("--horizons", type=lambda t: [int(v) for v in t.split(",")],
                   default=list(range(2, 16)))
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--curve-spacing", type=float, default=0.5)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", type=Path, default=Path("empclab-out"))
    args = p.parse_args()

    m = get_model("reactor")
    s = solve_sop(m)
    cfg = SchemeConfig("plain", s)
    rows = []
    for N in args.horizons:
        tr = simulate_closed_loop(m, cfg, N, args.x0, args.steps)
        rows.append((N, eventual_deviation(tr, s)))
        print(f"N={N:3d}  deviation={rows[-1][1]:.4e}")
    N, d = np.array(rows).T
    rate, log_a = np.polyfit(N, np.log(d), 1)
    print(f"fit: deviation ~ {np.exp(log_a):.3g} * exp({rate:.3f} N)")

    args.out.mkdir(parents=True, exist_ok=True)
    write(args.out / "plain_deviation.csv", ["N", "eventual_deviation"], rows)
    pts = SampleGrid.for_model(m, args.curve_spacing).points
    curve = rho_curve(m, s, cfg, pts, args.horizons, args.steps, jobs=args.jobs)
    write(args.out / "plain_rho_curve.csv", ["N", "rho"], curve)


if __name__ == "__main__":
    main()
