#!/usr/bin/env python3
"""Distance of open-loop optimal stages from the steady pair, for several horizons."""
import argparse
import csv
from pathlib import Path

import numpy as np

from empclab.empc import turnpike_metric
from empclab.model import get_model
from empclab.ocp import SchemeConfig, solve_ocp
from empclab.sop import solve_sop


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--scheme", default="plain", choices=["terminal", "plain", "gradcorr"])
    p.add_argument("--x0", type=lambda t: [float(v) for v in t.split(",")], default=[0.2, 0.8])
    p.add_argument("--horizons", type=lambda t: [int(v) for v in t.split(",")], default=[5, 10, 20, 40])
    p.add_argument("--eps", type=float, default=0.5)
    p.add_argument("--out", type=Path, default=Path("empclab-out"))
    args = p.parse_args()

    m = get_model("reactor")
    s = solve_sop(m)
    cfg = SchemeConfig(args.scheme, s)
    zbar = np.concatenate([s.x, s.u])
    rows = []
    for N in args.horizons:
        sol = solve_ocp(m, cfg, N, args.x0)
        if not sol.converged:
            print(f"N={N}: {sol.status.value}")
            continue
        dist = np.linalg.norm(np.hstack([sol.x[:-1], sol.u]) - zbar, axis=1)
        rows += [(N, k, d) for k, d in enumerate(dist)]
        print(f"N={N:3d}  stages farther than {args.eps:g}: {turnpike_metric(sol, s, args.eps)}")

    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / f"turnpike_{args.scheme}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["N", "k", "distance"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
