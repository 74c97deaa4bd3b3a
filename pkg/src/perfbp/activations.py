"""Pointwise activation functions and their derivatives."""

import numpy as np

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")


def _float(x):
    x = np.asarray(x)
    return x if x.dtype.kind == "f" else x.astype(np.float64)


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def check_activation(kind):
    if kind not in ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    return kind


def activate(kind, x):
    """Apply activation ``kind`` to ``x`` (float dtype is preserved)."""
    x = _float(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        return _sigmoid(np.atleast_1d(x)).reshape(x.shape)
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def derivative(kind, x, y=None):
    """Derivative of activation ``kind`` at pre-activation ``x``.

    ``y`` may carry the already computed ``activate(kind, x)`` to save work.
    The relu derivative at exactly 0 is 0.
    """
    x = _float(x)
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    if kind == "tanh":
        t = np.tanh(x) if y is None else y
        return 1.0 - t * t
    if kind == "sigmoid":
        s = activate("sigmoid", x) if y is None else y
        return s * (1.0 - s)
    if kind == "identity":
        return np.ones_like(x)
    raise ValueError(f"unknown activation {kind!r}")
