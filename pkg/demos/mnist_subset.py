"""
Error reduction on an MNIST subset
==================================

The width-halved conv net on the bundled 5000-digit MNIST subset.  The run
alternates neuron cycles and dendrite cycles until validation stops
improving, then reports the first-cycle test accuracy, the test accuracy at
the best validation epoch, and the relative error reduction between them.

A full run takes tens of minutes on one CPU.  ``--quick`` trains on 1000
digits with small budgets to show the mechanics in a couple of minutes.

Run: python demos/mnist_subset.py [--quick] [--seed N]
"""

import argparse
from pathlib import Path

from perfbp.config import load_config
from perfbp.orchestrator import run_experiment

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "mnist5k_fallback.yaml"

parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
parser.add_argument("--quick", action="store_true")
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

overrides = [f"seed={args.seed}"]
if args.quick:
    overrides += ["data.max_samples=1000", "patience=3", "max_dendrite_rounds=1",
                  "candidates.max_epochs=2"]
# progress lines go to stdout; the final summary closes the log
run_experiment(load_config(CONFIG, overrides))
