#!/usr/bin/env python3
"""Evaluate the dissipation inequality for the linear storage candidate on a box grid of (x, u)."""
import argparse
import csv
from pathlib import Path

import numpy as np

from empclab.empc import box_pairs, check_dissipation, linear_storage
from empclab.model import get_model
from empclab.sop import solve_sop


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--points", type=int, default=11, help="grid points per axis")
    p.add_argument("--strict", action="store_true", help="add the quadratic strictness margin")
    p.add_argument("--c", type=float, default=1e-4, help="strictness coefficient")
    p.add_argument("--out", type=Path, default=Path("empclab-out"))
    args = p.parse_args()

    m = get_model("reactor")
    s = solve_sop(m)
    storage = linear_storage(m, s)
    pairs = box_pairs(m, args.points)
    rep = check_dissipation(m, s, storage, pairs, strict=args.strict, c=args.c)
    print(f"storage: {storage.description} (min on grid {rep.storage_min:g})")
    print(f"violations {rep.violations}/{len(pairs)}, largest {rep.max_violation:.4g}")

    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "dissipation_grid.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x_A", "x_B", "u", "rotated_cost", "residual"])
        for (x, u), rot, res in zip(pairs, rep.rotated_cost, rep.residuals):
            w.writerow([*x, *u, rot, res])
    bad = np.flatnonzero(rep.residuals > 1e-12)
    if bad.size:
        worst = bad[np.argmax(rep.residuals[bad])]
        x, u = pairs[worst]
        print(f"worst pair x={x.tolist()} u={u.tolist()}")


if __name__ == "__main__":
    main()
