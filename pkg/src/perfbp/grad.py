"""Backward passes: standard, perforated, and the gradient-trained-dendrite ablation.

Three modes share one traversal:

``standard``
    Ordinary backpropagation.  Dendrite connections are weighted edges like
    any other, so error reaches presynaptic neurons through them too.
``perforated``
    Neuron deltas are computed from neuron-to-neuron connections only; the
    dendrite term of the presynaptic sum is multiplied by zero.  Dendrite
    output weights still get gradients because that connection ends at the
    host neuron.  Dendrite input-side slots are present and exactly zero.
``gd_dendrites``
    Presynaptic deltas as in ``perforated``, but each dendrite's input-side
    weights get the gradient that arrives through its own output connection
    (and through later siblings of the same host).
"""

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .activations import derivative
from .conv import col2im, maxpool2d_backward
from .errors import NonFiniteError, ShapeError
from .losses import loss_value, output_delta
from .network import Conv2d, Dropout, Flatten, MaxPool2d, forward, is_host, to_rows

MODES = ("standard", "perforated", "gd_dendrites")


@dataclass
class GradBuffer:
    """Per-layer neuron deltas (pre-activation layout) and per-parameter gradients.

    Gradients are summed over the batch; divide by the batch size for the
    mean-loss gradient.
    """

    mode: str
    deltas: list = field(default_factory=list)
    grads: dict = field(default_factory=dict)


def backprop(net, cache, out_delta, mode="perforated", param_grads=True):
    """Backpropagate ``out_delta`` (gradient w.r.t. network outputs) through ``cache``."""
    if mode not in MODES:
        raise ValueError(f"unknown backprop mode {mode!r}")
    if cache.signature != net.signature() or len(cache.post) != len(net.layers):
        raise ShapeError("forward cache does not belong to this network state")
    dy = np.asarray(out_delta, dtype=net.dtype)
    if dy.shape != cache.post[-1].shape:
        raise ShapeError(f"output delta {dy.shape} != output {cache.post[-1].shape}")
    buf = GradBuffer(mode=mode, deltas=[None] * len(net.layers))
    first_needed = _first_host(net)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        need_dx = i > first_needed
        if is_host(layer):
            dy = _host_backward(net, cache, i, dy, mode, buf, param_grads, need_dx)
        elif isinstance(layer, MaxPool2d):
            dy = maxpool2d_backward(dy, cache.masks[i], cache.inputs[i].shape, layer.k)
        elif isinstance(layer, Dropout):
            if cache.masks[i] is not None:
                dy = dy * cache.masks[i]
        elif isinstance(layer, Flatten):
            dy = dy.reshape(cache.inputs[i].shape)
        if i <= first_needed:
            break
    return buf


def backprop_standard(net, cache, out_delta):
    return backprop(net, cache, out_delta, mode="standard")


def backprop_perforated(net, cache, out_delta):
    return backprop(net, cache, out_delta, mode="perforated")


def _first_host(net):
    hosts = net.host_layers()
    return hosts[0] if hosts else len(net.layers)


def _host_backward(net, cache, i, dy, mode, buf, param_grads, need_dx):
    layer = net.layers[i]
    p = net.params[i]
    rounds = net.dendrites[i]
    m = net.width(i)
    z = cache.pre[i]
    delta = dy * derivative(layer.activation, z, cache.post[i])
    buf.deltas[i] = delta
    conv = isinstance(layer, Conv2d)
    # conv deltas are kept channel-major (m, B*H*W); D is the rows-layout view
    DT = delta.transpose(1, 0, 2, 3).reshape(m, -1) if conv else delta.T
    D = DT.T
    rows = cache.rows[i]
    gpost = cache.dendrite_post[i]
    W2 = p["weight"].reshape(m, -1)
    name = f"layers.{i}"
    if param_grads:
        buf.grads[f"{name}.weight"] = (DT @ rows).reshape(p["weight"].shape)
        if "bias" in p:
            buf.grads[f"{name}.bias"] = D.sum(axis=0)
        for t, rnd in enumerate(rounds):
            buf.grads[f"{name}.dendrites.{t}.output"] = (D * gpost[t]).sum(axis=0)

    through = mode in ("standard", "gd_dendrites") and rounds
    dA = [None] * len(rounds)
    if through:
        for t in range(len(rounds) - 1, -1, -1):
            dg = D * rounds[t].output_weights
            for u in range(t + 1, len(rounds)):
                dg = dg + dA[u] * rounds[u].sibling_weights[:, t]
            dA[t] = dg * derivative(rounds[t].activation, cache.dendrite_pre[i][t], gpost[t])
    if param_grads:
        for t, rnd in enumerate(rounds):
            base = f"{name}.dendrites.{t}"
            if through:
                buf.grads[f"{base}.input"] = (dA[t].T @ rows).reshape(rnd.input_weights.shape)
                sib = np.zeros_like(rnd.sibling_weights)
                for s in range(t):
                    sib[:, s] = (dA[t] * gpost[s]).sum(axis=0)
                buf.grads[f"{base}.sibling"] = sib
                if rnd.bias is not None:
                    buf.grads[f"{base}.bias"] = dA[t].sum(axis=0)
            else:
                buf.grads[f"{base}.input"] = np.zeros_like(rnd.input_weights)
                buf.grads[f"{base}.sibling"] = np.zeros_like(rnd.sibling_weights)
                if rnd.bias is not None:
                    buf.grads[f"{base}.bias"] = np.zeros_like(rnd.bias)

    if not need_dx:
        return None
    if conv:
        dcols = W2.T @ DT
        if mode == "standard":
            for t, rnd in enumerate(rounds):
                dcols = dcols + rnd.input_weights.reshape(m, -1).T @ dA[t].T
        kh, kw = layer.kernel_size
        return col2im(dcols, cache.inputs[i].shape, kh, kw, layer.stride, layer.padding, transposed=True)
    drows = D @ W2
    if mode == "standard":
        for t, rnd in enumerate(rounds):
            drows = drows + dA[t] @ rnd.input_weights.reshape(m, -1)
    return drows


# -- finite-difference verification -----------------------------------

@contextlib.contextmanager
def _writable(arr):
    was = arr.flags.writeable
    arr.flags.writeable = True
    try:
        yield arr
    finally:
        arr.flags.writeable = was


def kink_signature(net, cache):
    """Which side of every non-differentiable point the forward pass sits on.

    Relu on/off patterns (neurons and dendrites) and max-pool winners.  Two
    evaluations with equal signatures lie on the same smooth piece.
    """
    sig = []
    for i, layer in enumerate(net.layers):
        if is_host(layer):
            if layer.activation == "relu":
                sig.append(cache.pre[i] > 0)
            for t, rnd in enumerate(net.dendrites[i]):
                if rnd.activation == "relu":
                    sig.append(cache.dendrite_pre[i][t] > 0)
        elif isinstance(layer, MaxPool2d):
            sig.append(cache.masks[i])
    return sig


def _same(sig_a, sig_b):
    return all(np.array_equal(a, b) for a, b in zip(sig_a, sig_b))


def relative_error(analytic, numeric, floor=1e-5):
    """|a - n| / max(|a|, |n|, floor); ``floor`` keeps near-zero gradients from dividing by ~0."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def numeric_gradient(net, loss, batch, targets, name, index, eps, frozen=None, base_sig=None):
    """Central difference of the mean loss w.r.t. one scalar parameter.

    Returns ``(value, smooth)``; ``smooth`` is False when the two probes
    straddle a relu kink or a max-pool tie, where the difference is not a
    derivative estimate.
    """
    arr = dict(net.named_arrays())[name]
    if base_sig is None:
        base_sig = kink_signature(net, forward(net, batch, "eval", frozen_dendrites=frozen)[1])
    with _writable(arr):
        old = arr[index]
        arr[index] = old + eps
        out_p, cache_p = forward(net, batch, "eval", frozen_dendrites=frozen)
        arr[index] = old - eps
        out_m, cache_m = forward(net, batch, "eval", frozen_dendrites=frozen)
        arr[index] = old
    value = (loss_value(loss, out_p, targets) - loss_value(loss, out_m, targets)) / (2 * eps)
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite finite difference for {name}{index}")
    smooth = _same(kink_signature(net, cache_p), base_sig) and _same(kink_signature(net, cache_m), base_sig)
    return value, smooth


def finite_diff_check(net, loss, batch, targets, detach_dendrites=False, eps=1e-5,
                      names=None, max_per_array=None, seed=0, floor=1e-5, return_details=False):
    """Worst relative error between analytic and central-difference gradients.

    With ``detach_dendrites`` the analytic side is the perforated backward
    pass and the numeric side perturbs a graph whose dendrite activations are
    frozen at their current values; otherwise standard backprop is compared
    with the full graph.  Dropout is never applied.  Parameters whose probes
    cross a kink are skipped (reported in the details).
    """
    if not eps > 0:
        raise ValueError("eps must be > 0")
    batch = np.asarray(batch, dtype=net.dtype)
    out, cache = forward(net, batch, "eval")
    mode = "perforated" if detach_dendrites else "standard"
    buf = backprop(net, cache, output_delta(loss, out, targets), mode=mode)
    B = batch.shape[0]
    frozen = None
    if detach_dendrites:
        frozen = {i: [g.copy() for g in gs] for i, gs in enumerate(cache.dendrite_post) if gs}
    base_sig = kink_signature(net, forward(net, batch, "eval", frozen_dendrites=frozen)[1])
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = skipped = 0
    for name, arr in net.named_arrays():
        if names is not None and name not in names:
            continue
        analytic = buf.grads[name] / B
        flat = np.arange(arr.size)
        if max_per_array is not None and arr.size > max_per_array:
            flat = rng.choice(arr.size, size=max_per_array, replace=False)
        for k in flat:
            index = np.unravel_index(k, arr.shape)
            num, smooth = numeric_gradient(net, loss, batch, targets, name, index, eps, frozen, base_sig)
            if not smooth:
                skipped += 1
                continue
            checked += 1
            worst = max(worst, float(relative_error(analytic[index], num, floor)))
    if return_details:
        return worst, {"checked": checked, "skipped": skipped}
    return worst
