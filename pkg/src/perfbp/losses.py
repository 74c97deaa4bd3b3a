"""Loss functions.

``loss_value`` is the batch mean.  ``output_delta`` is the per-sample
gradient of each sample's own loss with respect to the network outputs, so
summing backprop results over the batch and dividing by the batch size
yields the gradient of the mean loss.
"""

import numpy as np

LOSSES = ("cross_entropy_softmax", "mse")


def check_loss(kind):
    if kind not in LOSSES:
        raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")
    return kind


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_value(kind, outputs, targets):
    if kind == "cross_entropy_softmax":
        labels = np.asarray(targets, dtype=np.int64)
        return float(-log_softmax(outputs)[np.arange(len(labels)), labels].mean())
    if kind == "mse":
        diff = outputs - np.asarray(targets, dtype=outputs.dtype).reshape(outputs.shape)
        return float((diff * diff).sum(axis=1).mean())
    raise ValueError(f"unknown loss {kind!r}")


def output_delta(kind, outputs, targets):
    if kind == "cross_entropy_softmax":
        labels = np.asarray(targets, dtype=np.int64)
        d = softmax(outputs)
        d[np.arange(len(labels)), labels] -= 1.0
        return d
    if kind == "mse":
        return 2.0 * (outputs - np.asarray(targets, dtype=outputs.dtype).reshape(outputs.shape))
    raise ValueError(f"unknown loss {kind!r}")
