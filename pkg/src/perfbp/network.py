"""Feed-forward networks of dense and convolutional layers with attached dendrites.

A dendrite belongs to exactly one neuron (one output channel for conv
layers).  It sees the same presynaptic values as its host, plus the outputs
of older dendrites of the same host, and feeds its activation into the host's
pre-activation through a single output weight.

Dendrites of a layer are stored in *rounds*: round ``t`` holds one dendrite
per neuron, all added by the same promotion, so the whole round is a weight
tensor shaped like the host's weight tensor.  :meth:`Network.dendrite_node`
gives the per-neuron view.
"""

import copy
import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .activations import activate, check_activation
from .conv import im2col, maxpool2d, output_size
from .errors import NonFiniteError, ShapeError


@dataclass(frozen=True)
class Dense:
    out_features: int
    activation: str = "relu"
    bias: bool = True

    def __post_init__(self):
        if self.out_features < 1:
            raise ValueError("dense layer needs at least one output")
        check_activation(self.activation)


@dataclass(frozen=True)
class Conv2d:
    out_channels: int
    kernel_size: tuple = (3, 3)
    stride: int = 1
    padding: int = 0
    activation: str = "relu"
    bias: bool = True

    def __post_init__(self):
        ks = self.kernel_size
        if np.ndim(ks) == 0:
            ks = (int(ks), int(ks))
        object.__setattr__(self, "kernel_size", tuple(int(k) for k in ks))
        if self.out_channels < 1 or min(self.kernel_size) < 1 or self.stride < 1:
            raise ValueError("conv2d needs out_channels, kernel dims and stride >= 1")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")
        check_activation(self.activation)


@dataclass(frozen=True)
class MaxPool2d:
    k: int = 2

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("pool size must be >= 1")


@dataclass(frozen=True)
class Dropout:
    rate: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("dropout rate must satisfy 0 <= rate < 1")


@dataclass(frozen=True)
class Flatten:
    pass


LAYER_TYPES = {
    "dense": Dense,
    "conv2d": Conv2d,
    "maxpool2d": MaxPool2d,
    "dropout": Dropout,
    "flatten": Flatten,
}
_TYPE_NAMES = {cls: name for name, cls in LAYER_TYPES.items()}


def layer_to_dict(layer):
    d = {"type": _TYPE_NAMES[type(layer)]}
    for key, value in asdict(layer).items():
        d[key] = list(value) if isinstance(value, tuple) else value
    return d


def layer_from_dict(d):
    d = dict(d)
    kind = d.pop("type")
    if kind not in LAYER_TYPES:
        raise ValueError(f"unknown layer type {kind!r}")
    return LAYER_TYPES[kind](**d)


def is_host(layer):
    """Only dense and conv layers carry neurons, hence dendrites."""
    return isinstance(layer, (Dense, Conv2d))


@dataclass
class DendriteRound:
    """One dendrite for every neuron of a host layer, added by one promotion.

    ``input_weights`` has the host weight shape; ``sibling_weights[j, s]``
    connects neuron j's dendrite from round s to this one; ``output_weights[j]``
    is the single connection into neuron j.
    """

    input_weights: np.ndarray
    sibling_weights: np.ndarray
    output_weights: np.ndarray
    activation: str
    birth_cycle: int = 0
    frozen: bool = True
    bias: np.ndarray | None = None

    def __post_init__(self):
        check_activation(self.activation)
        if self.frozen:
            self.freeze()

    def freeze(self):
        """Lock input-side weights; any later in-place write raises."""
        self.frozen = True
        for arr in (self.input_weights, self.sibling_weights, self.bias):
            if arr is not None:
                arr.flags.writeable = False

    def __deepcopy__(self, memo):
        # plain array copies come back writeable, so re-lock them
        return DendriteRound(
            input_weights=self.input_weights.copy(),
            sibling_weights=self.sibling_weights.copy(),
            output_weights=self.output_weights.copy(),
            activation=self.activation,
            birth_cycle=self.birth_cycle,
            frozen=self.frozen,
            bias=None if self.bias is None else self.bias.copy(),
        )


@dataclass
class DendriteNode:
    host: tuple
    input_weights: np.ndarray
    sibling_weights: np.ndarray
    output_weight: float
    activation: str
    birth_cycle: int
    frozen: bool
    bias: float | None = None


@dataclass
class ForwardCache:
    """Everything a backward pass needs from one forward call.

    For host layers ``rows`` holds the presynaptic values laid out one sample
    (or one conv output location) per row, and ``dendrite_pre`` /
    ``dendrite_post`` hold per-round arrays in that same (rows, neurons)
    layout.  ``pre`` and ``post`` use the layer's own layout.
    """

    mode: str
    signature: tuple
    inputs: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)
    dendrite_pre: list = field(default_factory=list)
    dendrite_post: list = field(default_factory=list)
    masks: list = field(default_factory=list)


def to_rows(arr):
    """(B, m) -> (B, m); (B, m, H, W) -> (B*H*W, m)."""
    if arr.ndim == 2:
        return arr
    return arr.transpose(0, 2, 3, 1).reshape(-1, arr.shape[1])


def from_rows(rows, like_shape):
    if len(like_shape) == 2:
        return rows
    B, m, H, W = like_shape
    return rows.reshape(B, H, W, m).transpose(0, 3, 1, 2)


def _infer_shapes(layers, input_shape):
    shapes = []
    shape = tuple(input_shape)
    for i, layer in enumerate(layers):
        if isinstance(layer, Dense):
            if len(shape) != 1:
                raise ShapeError(f"layer {i}: dense layer needs a flat input, got {shape}")
            shape = (layer.out_features,)
        elif isinstance(layer, Conv2d):
            if len(shape) != 3:
                raise ShapeError(f"layer {i}: conv2d needs a (C, H, W) input, got {shape}")
            kh, kw = layer.kernel_size
            C, H, W = shape
            if H + 2 * layer.padding < kh or W + 2 * layer.padding < kw:
                raise ShapeError(f"layer {i}: kernel larger than padded input {shape}")
            shape = (
                layer.out_channels,
                output_size(H, kh, layer.stride, layer.padding),
                output_size(W, kw, layer.stride, layer.padding),
            )
        elif isinstance(layer, MaxPool2d):
            if len(shape) != 3 or shape[1] < layer.k or shape[2] < layer.k:
                raise ShapeError(f"layer {i}: cannot pool {shape} with k={layer.k}")
            shape = (shape[0], shape[1] // layer.k, shape[2] // layer.k)
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        shapes.append(shape)
    return shapes


class Network:
    """Layered feed-forward model.

    ``params[i]`` is ``{"weight": ..., "bias": ...}`` for host layers (bias
    omitted when the layer has none) and ``None`` otherwise.  Dense weights are
    (out, in); conv kernels are (out, in, kh, kw).  Weights and biases are
    initialised uniform in +-1/sqrt(fan_in).
    """

    def __init__(self, layers, input_shape, seed=0, params=None, dtype="float64"):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.shapes = _infer_shapes(self.layers, self.input_shape)
        self.dendrites = [[] for _ in self.layers]
        self.dtype = np.dtype(dtype)
        if self.dtype.kind != "f":
            raise ValueError(f"dtype must be a float type, got {self.dtype}")
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(seed)
        self.params = []
        for i, layer in enumerate(self.layers):
            if not is_host(layer):
                self.params.append(None)
                continue
            shape = self.weight_shape(i)
            bound = 1.0 / np.sqrt(np.prod(shape[1:]))
            # draws are float64 so both precisions start from the same values
            p = {"weight": rng.uniform(-bound, bound, size=shape).astype(self.dtype)}
            if layer.bias:
                p["bias"] = rng.uniform(-bound, bound, size=shape[0]).astype(self.dtype)
            self.params.append(p)

    # -- structure -----------------------------------------------------
    def in_shape(self, i):
        return self.input_shape if i == 0 else self.shapes[i - 1]

    def weight_shape(self, i):
        layer = self.layers[i]
        if isinstance(layer, Dense):
            return (layer.out_features, self.in_shape(i)[0])
        if isinstance(layer, Conv2d):
            return (layer.out_channels, self.in_shape(i)[0], *layer.kernel_size)
        raise ShapeError(f"layer {i} has no weights")

    def host_layers(self):
        return [i for i, layer in enumerate(self.layers) if is_host(layer)]

    def output_layer(self):
        return self.host_layers()[-1]

    def width(self, i):
        return self.weight_shape(i)[0]

    def fan_in(self, i):
        return int(np.prod(self.weight_shape(i)[1:]))

    @property
    def output_shape(self):
        return self.shapes[-1]

    def signature(self):
        return tuple(len(d) for d in self.dendrites)

    def num_dendrites(self):
        return sum(len(r) * self.width(i) for i, r in enumerate(self.dendrites) if r)

    # -- dendrites -----------------------------------------------------
    def add_dendrite_round(self, i, rnd):
        if not is_host(self.layers[i]):
            raise ShapeError(f"layer {i} ({type(self.layers[i]).__name__}) cannot host dendrites")
        m = self.width(i)
        t = len(self.dendrites[i])
        if rnd.input_weights.shape != self.weight_shape(i):
            raise ShapeError(
                f"dendrite input weights {rnd.input_weights.shape} != host weights {self.weight_shape(i)}"
            )
        if rnd.sibling_weights.shape != (m, t):
            raise ShapeError(f"sibling weights must be {(m, t)}, got {rnd.sibling_weights.shape}")
        if rnd.output_weights.shape != (m,):
            raise ShapeError(f"output weights must be {(m,)}, got {rnd.output_weights.shape}")
        if rnd.bias is not None and rnd.bias.shape != (m,):
            raise ShapeError(f"dendrite bias must be {(m,)}")
        self.dendrites[i].append(rnd)

    def dendrite_node(self, layer, neuron, k):
        rnd = self.dendrites[layer][k]
        return DendriteNode(
            host=(layer, neuron),
            input_weights=rnd.input_weights[neuron].copy(),
            sibling_weights=rnd.sibling_weights[neuron].copy(),
            output_weight=float(rnd.output_weights[neuron]),
            activation=rnd.activation,
            birth_cycle=rnd.birth_cycle,
            frozen=rnd.frozen,
            bias=None if rnd.bias is None else float(rnd.bias[neuron]),
        )

    # -- parameters ----------------------------------------------------
    def named_arrays(self):
        """All parameter arrays as (name, array), in a fixed order."""
        for i, p in enumerate(self.params):
            if p is None:
                continue
            for key in ("weight", "bias"):
                if key in p:
                    yield f"layers.{i}.{key}", p[key]
            for t, rnd in enumerate(self.dendrites[i]):
                base = f"layers.{i}.dendrites.{t}"
                yield f"{base}.input", rnd.input_weights
                yield f"{base}.sibling", rnd.sibling_weights
                if rnd.bias is not None:
                    yield f"{base}.bias", rnd.bias
                yield f"{base}.output", rnd.output_weights

    def trainable(self):
        """Arrays the neuron-cycle optimizer may update in place.

        Neuron weights and biases, every dendrite output weight, and the
        input-side weights of dendrites that are not frozen.
        """
        out = {}
        for name, arr in self.named_arrays():
            if ".dendrites." in name and not name.endswith(".output"):
                i, t = _parse_dendrite_name(name)
                if self.dendrites[i][t].frozen:
                    continue
            out[name] = arr
        return out

    def neuron_arrays(self):
        return [(n, a) for n, a in self.named_arrays() if ".dendrites." not in n]

    def neuron_digest(self):
        return _digest(self.neuron_arrays())

    def dendrite_input_digest(self):
        return _digest(
            (n, a) for n, a in self.named_arrays()
            if ".dendrites." in n and not n.endswith(".output")
        )

    def copy(self):
        return copy.deepcopy(self)

    def load_arrays_from(self, other):
        """Overwrite every parameter (and the dendrite topology) with ``other``'s."""
        self.params = copy.deepcopy(other.params)
        self.dendrites = copy.deepcopy(other.dendrites)


def _parse_dendrite_name(name):
    parts = name.split(".")
    return int(parts[1]), int(parts[3])


def _digest(named):
    h = hashlib.sha256()
    for name, arr in named:
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def forward(net, batch, mode="eval", rng_seed=0, frozen_dendrites=None):
    """Evaluate ``net`` on ``batch`` (leading batch axis).

    ``mode="train"`` applies dropout with masks drawn from ``rng_seed``.
    ``frozen_dendrites`` optionally maps layer index to a list of per-round
    activation arrays that replace the live dendrite outputs; this builds the
    detached graph used to verify perforated gradients.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(batch, dtype=net.dtype)
    if x.shape[1:] != net.input_shape:
        raise ShapeError(f"batch shape {x.shape} does not match input shape {net.input_shape}")
    rng = np.random.default_rng(rng_seed) if mode == "train" else None
    cache = ForwardCache(mode=mode, signature=net.signature())
    for i, layer in enumerate(net.layers):
        cache.inputs.append(x)
        rows = pre = mask = None
        dpre, dpost = [], []
        if is_host(layer):
            rows, pre, dpre, dpost, x = _host_forward(
                net, i, x, None if frozen_dendrites is None else frozen_dendrites.get(i)
            )
        elif isinstance(layer, MaxPool2d):
            x, mask = maxpool2d(x, layer.k)
        elif isinstance(layer, Dropout):
            if mode == "train" and layer.rate > 0:
                keep = rng.random(x.shape) >= layer.rate
                mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - layer.rate))
                x = x * mask
        elif isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], -1)
        cache.rows.append(rows)
        cache.pre.append(pre)
        cache.post.append(x)
        cache.dendrite_pre.append(dpre)
        cache.dendrite_post.append(dpost)
        cache.masks.append(mask)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("forward pass produced non-finite outputs")
    return x, cache


def host_rows(net, i, x):
    """Presynaptic rows of host layer ``i`` for layer input ``x``."""
    layer = net.layers[i]
    if isinstance(layer, Conv2d):
        kh, kw = layer.kernel_size
        return im2col(x, kh, kw, layer.stride, layer.padding)
    return x


def _host_forward(net, i, x, frozen):
    layer = net.layers[i]
    p = net.params[i]
    rounds = net.dendrites[i]
    m = net.width(i)
    rows = host_rows(net, i, x)
    # the neuron product stays separate from the dendrite one so that adding
    # inert dendrites cannot change BLAS blocking and hence the last bit
    z = rows @ p["weight"].reshape(m, -1).T
    if rounds:
        Zd = rows @ np.concatenate([r.input_weights.reshape(m, -1) for r in rounds]).T
    if "bias" in p:
        z = z + p["bias"]
    dpre, dpost = [], []
    for t, rnd in enumerate(rounds):
        a = Zd[:, m * t:m * (t + 1)]
        for s in range(t):
            a = a + rnd.sibling_weights[:, s] * dpost[s]
        if rnd.bias is not None:
            a = a + rnd.bias
        g = activate(rnd.activation, a)
        dpre.append(a)
        dpost.append(g)
        z = z + rnd.output_weights * (g if frozen is None else frozen[t])
    y = activate(layer.activation, z)
    if isinstance(layer, Conv2d):
        B = x.shape[0]
        shape = (B, m, *net.shapes[i][1:])
        return rows, from_rows(z, shape), dpre, dpost, from_rows(y, shape)
    return rows, z, dpre, dpost, y


def param_breakdown(net):
    """Itemised parameter counts.

    Neuron side: weights and biases.  Dendrite side: input weights (one per
    host input connection), sibling weights, optional biases and exactly one
    output weight per dendrite.
    """
    counts = dict.fromkeys(
        ("neuron_weights", "neuron_biases", "dendrite_inputs", "dendrite_siblings",
         "dendrite_biases", "dendrite_outputs"), 0)
    for i, p in enumerate(net.params):
        if p is None:
            continue
        counts["neuron_weights"] += p["weight"].size
        counts["neuron_biases"] += p["bias"].size if "bias" in p else 0
        for rnd in net.dendrites[i]:
            counts["dendrite_inputs"] += rnd.input_weights.size
            counts["dendrite_siblings"] += rnd.sibling_weights.size
            counts["dendrite_biases"] += 0 if rnd.bias is None else rnd.bias.size
            counts["dendrite_outputs"] += rnd.output_weights.size
    return counts


def param_count(net):
    """Return ``(neuron_params, dendrite_params)``."""
    c = param_breakdown(net)
    neuron = c["neuron_weights"] + c["neuron_biases"]
    dendrite = (c["dendrite_inputs"] + c["dendrite_siblings"]
                + c["dendrite_biases"] + c["dendrite_outputs"])
    return neuron, dendrite
