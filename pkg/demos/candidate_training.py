"""
Candidates chase the error
==========================

A linear neuron with zero weights: its error for each sample is a fixed
random stream, and input 0 carries that stream plus a little noise.  A pool
of tanh candidates starts from random weights and climbs the correlation
objective.  The printout shows the best |correlation| per epoch, then
promotes the winner as a dendrite with a zero output weight, which leaves
the network's outputs unchanged.

Run: python demos/candidate_training.py
"""

import numpy as np

from perfbp.dendrites import CandidateSettings, promote_best, spawn_candidates, train_candidates
from perfbp.network import Dense, Network, forward

rng = np.random.default_rng(0)
n, features = 256, 5
error = rng.normal(size=n)
x = rng.normal(size=(n, features))
x[:, 0] = error + 0.1 * rng.normal(size=n)
# mse delta of an all-zero identity neuron is -2 * target
targets = (-error / 2)[:, None]
net = Network([Dense(1, activation="identity")], (features,),
              params=[{"weight": np.zeros((1, features)), "bias": np.zeros(1)}])

settings = CandidateSettings(pool_size=4, max_epochs=40, patience=5, activation="tanh")
pool = spawn_candidates(net, settings.pool_size, seed=0, settings=settings)
_, history = train_candidates(pool, net, x, targets, "mse", settings)
for h in history[::5] + history[-1:]:
    print(f"epoch {h['epoch']:>2}: best |r| = {h['scores'][0].max():.3f}")

before = forward(net, x)[0]
report = promote_best(pool, net)
print(f"promoted candidate {report[0]['candidate']} with score {report[0]['score']:.3f}")
print("outputs unchanged after promotion:", np.array_equal(before, forward(net, x)[0]))
