"""SGD and Adam updating named numpy arrays in place, plus a step schedule."""

from dataclasses import dataclass

import numpy as np


@dataclass
class OptimizerSettings:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "constant"
    gamma: float = 0.7
    step_size: int = 1

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")
        if self.schedule not in ("constant", "step"):
            raise ValueError(f"schedule must be 'constant' or 'step', got {self.schedule!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")

    def lr_at(self, epoch):
        """Learning rate for 1-based ``epoch`` of a cycle."""
        if self.schedule == "step":
            return self.lr * self.gamma ** ((epoch - 1) // self.step_size)
        return self.lr


class SGD:
    def __init__(self, settings):
        self.settings = settings
        self.velocity = {}

    def step(self, params, grads, lr):
        mu = self.settings.momentum
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if mu:
                v = self.velocity.get(name)
                v = g.copy() if v is None else mu * v + g
                self.velocity[name] = v
                g = v
            p -= lr * g

    def state_dict(self):
        return {"velocity": self.velocity}

    def load_state_dict(self, state):
        self.velocity = {k: np.array(v) for k, v in state.get("velocity", {}).items()}


class Adam:
    def __init__(self, settings):
        self.settings = settings
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads, lr):
        s = self.settings
        self.t += 1
        c1 = 1.0 - s.beta1 ** self.t
        c2 = 1.0 - s.beta2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - s.beta1) * g if m is None else s.beta1 * m + (1 - s.beta1) * g
            v = (1 - s.beta2) * g * g if v is None else s.beta2 * v + (1 - s.beta2) * g * g
            self.m[name], self.v[name] = m, v
            p -= lr * (m / c1) / (np.sqrt(v / c2) + s.eps)

    def state_dict(self):
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state):
        self.t = int(state.get("t", 0))
        self.m = {k: np.array(v) for k, v in state.get("m", {}).items()}
        self.v = {k: np.array(v) for k, v in state.get("v", {}).items()}


def make_optimizer(settings):
    return Adam(settings) if settings.kind == "adam" else SGD(settings)
