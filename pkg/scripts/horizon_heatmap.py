#!/usr/bin/env python3
"""Minimum-time horizon to reach the steady state, per initial state, as a CSV and a text grid."""
import argparse
import csv
import os
from pathlib import Path

import numpy as np

from empclab.horizon import INF, SampleGrid, horizon_map_terminal
from empclab.model import get_model
from empclab.sop import solve_sop


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--model", default="reactor")
    p.add_argument("--spacing", type=float, default=0.05)
    p.add_argument("--nmax", type=int, default=30)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", type=Path, default=Path("empclab-out"))
    args = p.parse_args()

    m = get_model(args.model)
    s = solve_sop(m)
    grid = SampleGrid.for_model(m, args.spacing)
    hm = horizon_map_terminal(m, s, grid, args.nmax, jobs=args.jobs)

    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "terminal_heatmap.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x0_A", "x0_B", "N"])
        w.writerows(hm.rows())

    # rows: x_B from top to bottom, columns: x_A
    n = int(round(1 / args.spacing)) + 1
    vals = np.array(hm.values, dtype=float).reshape(n, n)
    for j in range(n - 1, -1, -1):
        print(" ".join("  ." if v == INF else f"{int(v):3d}" for v in vals[:, j]))
    print(f"aggregate {hm.aggregate}, feasible {len(hm.finite)}, infeasible {hm.infeasible_count}")


if __name__ == "__main__":
    main()
