#!/usr/bin/env python3
"""Desk-scale convergence experiment: 3 workers, 30 rounds x 3 epochs.

Writes per-epoch accuracy curves (metrics.csv), the full run report, and the
ledger event log under results/convergence/. Extra CLI flags pass through,
e.g. ``python scripts/run_convergence.py --seed 7``.
"""

import sys

from fedsim.cli import cli

ARGS = [
    "run",
    "--workers", "3",
    "--rounds", "30",
    "--epochs-per-round", "3",
    "--top-k", "2",
    "--reward", "1000",
    "--collateral", "100",
    "--dataset-n", "3000",
    "--dataset-dim", "64",
    "--classes", "10",
    "--spread", "0.3",
    "--seed", "42",
    "--out-dir", "results/convergence",
]

if __name__ == "__main__":
    cli(ARGS + sys.argv[1:])
