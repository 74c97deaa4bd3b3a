"""Shared fixtures: small random networks with and without dendrites."""

import numpy as np
import pytest

from perfbp.activations import ACTIVATIONS
from perfbp.network import Conv2d, Dense, DendriteRound, Flatten, MaxPool2d, Network


def random_layers(rng, n_hosts, out_width=3, allow_conv=True, activations=ACTIVATIONS):
    """Layer list with ``n_hosts`` dense/conv layers, conv first when drawn.

    Returns (layers, input_shape).
    """
    n_conv = int(rng.integers(0, n_hosts)) if allow_conv else 0
    layers = []
    acts = [activations[int(k)] for k in rng.integers(0, len(activations), size=n_hosts)]
    if n_conv:
        input_shape = (int(rng.integers(1, 3)), 6, 6)
        for c in range(n_conv):
            pad = int(rng.integers(0, 2))
            layers.append(Conv2d(int(rng.integers(1, 4)), (2, 2) if c else (3, 3), padding=pad,
                                 activation=acts[c], bias=bool(rng.integers(0, 2)) or c == 0))
        if rng.random() < 0.5:
            layers.append(MaxPool2d(2))
        layers.append(Flatten())
    else:
        input_shape = (int(rng.integers(2, 5)),)
    for d in range(n_conv, n_hosts):
        width = out_width if d == n_hosts - 1 else int(rng.integers(2, 5))
        layers.append(Dense(width, activation=acts[d]))
    return layers, input_shape


def attach_random_dendrites(net, rng, rounds=1, frozen=True, scale=0.5, activations=None):
    """Give every host layer ``rounds`` rounds of random dendrites."""
    for i in net.host_layers():
        m = net.width(i)
        for _ in range(rounds):
            t = len(net.dendrites[i])
            act = (activations or ACTIVATIONS)[int(rng.integers(0, len(activations or ACTIVATIONS)))]
            net.add_dendrite_round(i, DendriteRound(
                input_weights=rng.uniform(-scale, scale, size=net.weight_shape(i)),
                sibling_weights=rng.uniform(-scale, scale, size=(m, t)),
                output_weights=rng.uniform(-scale, scale, size=m),
                activation=act,
                frozen=frozen,
            ))
    return net


def random_net(seed, n_hosts=None, dendrite_rounds=0, allow_conv=True):
    rng = np.random.default_rng(seed)
    n_hosts = n_hosts or int(rng.integers(2, 5))
    layers, input_shape = random_layers(rng, n_hosts, allow_conv=allow_conv)
    net = Network(layers, input_shape, seed=seed)
    if dendrite_rounds:
        attach_random_dendrites(net, rng, dendrite_rounds)
    return net


def random_batch(net, seed, n=4):
    rng = np.random.default_rng(seed + 1000)
    return rng.normal(size=(n, *net.input_shape))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE = {}


def record_criterion(key, ok, detail):
    """Remember a verdict; ``ok`` is a bool or a status word such as 'SKIP'."""
    ACCEPTANCE[key] = (ok if isinstance(ok, str) else ("PASS" if ok else "FAIL"), detail)
    return ok


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true",
                     help="run the desk-scale MNIST reproduction and ablation (tens of minutes to hours)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="slow; pass --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        status, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:<3} {status:<4}  {detail}")
