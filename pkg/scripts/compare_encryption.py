#!/usr/bin/env python3
"""Encrypted vs plaintext timing comparison on the convergence fixture.

Runs the same seeded simulation twice (sealing off, then on), checks the
final models are byte-identical, and writes encryption_timing.csv with the
wall-clock overhead fraction. Extra CLI flags pass through.
"""

import sys

from fedsim.cli import cli

ARGS = [
    "compare-encryption",
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
    "--out-dir", "results/encryption",
]

if __name__ == "__main__":
    cli(ARGS + sys.argv[1:])
