#!/usr/bin/env python3
"""Full pipeline: steady state, LQ check, the three horizon maps and the plain-scheme sweep.

Thin wrapper around ``empclab report``; all flags are passed through, e.g.

    python3 scripts/minimal_horizon_table.py --out results --jobs 4
"""
import sys

from empclab.cli import run_command

if __name__ == "__main__":
    sys.exit(run_command(["report", *sys.argv[1:]]))
