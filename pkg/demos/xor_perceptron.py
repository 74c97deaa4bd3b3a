"""
A single neuron learns XOR
==========================

One sigmoid neuron sees two inputs.  The label is 1 when both inputs share a
sign, so no straight line separates the classes and the neuron alone stalls
well short of perfect.  Each dendrite round adds one trained dendrite to
the neuron; a few rounds are enough for nearly every training point.

Run: python demos/xor_perceptron.py
"""

from pathlib import Path

from perfbp.config import load_config
from perfbp.network import param_count
from perfbp.orchestrator import evaluate, load_splits, run_experiment

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "xor_perceptron.yaml"


def train_accuracy(*overrides):
    cfg = load_config(CONFIG, list(overrides))
    splits, _ = load_splits(cfg)
    report = run_experiment(cfg, splits=splits, log=None)
    return report, evaluate(report.final_net, splits.train)


# the neuron on its own
base, base_acc = train_accuracy("ablation_mode=baseline_no_dendrites")
print(f"neuron alone:        train accuracy {base_acc:.3f}")

# the same neuron, now allowed to grow dendrites
grown, grown_acc = train_accuracy()
print(f"neuron + dendrites:  train accuracy {grown_acc:.3f} "
      f"after {grown.dendrites_added} dendrite rounds")

# one cycle line per phase: neuron cycles train weights, dendrite cycles
# train candidates while the neuron is frozen
for c in grown.cycles:
    print(f"  cycle {c.cycle_index} {c.kind:<8} epochs {len(c.epochs):>3}  val {c.cycle_val_score:.3f}")

neuron, dendrite = param_count(grown.final_net)
print(f"parameters: {neuron} neuron + {dendrite} dendrite")
