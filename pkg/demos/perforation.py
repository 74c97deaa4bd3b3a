"""
Where the error does not flow
=============================

A two-layer chain 3 -> 2 -> 1 with one dendrite on the output neuron.  With
standard backprop the hidden layer receives error through the neuron's
weights and through the dendrite.  Perforated backprop skips the dendrite
path: the hidden deltas come from the neuron weights alone, the dendrite's
output weight still gets its gradient and its input weights get none.

Run: python demos/perforation.py
"""

import numpy as np

from perfbp.grad import backprop, finite_diff_check
from perfbp.losses import output_delta
from perfbp.network import Dense, DendriteRound, Network, forward

rng = np.random.default_rng(0)
net = Network([Dense(2, activation="tanh"), Dense(1, activation="tanh")], (3,), seed=0)
net.add_dendrite_round(1, DendriteRound(
    input_weights=rng.uniform(0.5, 1.0, size=(1, 2)),
    sibling_weights=np.zeros((1, 0)),
    output_weights=np.array([0.8]),
    activation="tanh",
))

x = rng.normal(size=(6, 3))
t = np.zeros((6, 1))
out, cache = forward(net, x)
dy = output_delta("mse", out, t)

standard = backprop(net, cache, dy, mode="standard")
perforated = backprop(net, cache, dy, mode="perforated")

print("hidden-layer deltas, first sample")
print("  standard:  ", standard.deltas[0][0])
print("  perforated:", perforated.deltas[0][0])
print("dendrite output-weight gradient:", perforated.grads["layers.1.dendrites.0.output"])
print("dendrite input-weight gradient: ", perforated.grads["layers.1.dendrites.0.input"])

# the perforated gradients are exact for a graph whose dendrite activations
# are held constant; central differences agree to many digits
err = finite_diff_check(net, "mse", x, t, detach_dendrites=True)
print(f"worst relative error vs finite differences: {err:.1e}")
