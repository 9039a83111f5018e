#!/usr/bin/env python3
"""Worker-count scaling experiment: 3-worker vs 5-worker runs, one dataset.

Both runs draw the identical dataset from the shared seed; scaling.csv holds
the combined accuracy-vs-epoch curves keyed by worker count. Extra CLI flags
pass through.
"""

import sys

from fedsim.cli import cli

ARGS = [
    "scale-workers",
    "--workers-list", "3,5",
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
    "--out-dir", "results/scaling",
]

if __name__ == "__main__":
    cli(ARGS + sys.argv[1:])
