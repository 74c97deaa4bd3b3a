"""Candidate dendrites: spawning, correlation training and promotion.

Every host neuron gets a pool of candidates.  A candidate sees the host's
presynaptic values and the outputs of the host's existing dendrites, and is
trained to make its activation covary with the host's backpropagated error.
Training uses running means of the candidate activation and of the host
delta; the per-sample covariance term is

    (g(in_k) - mean g) * (delta_i - mean delta_i)

and the ascent direction for an input weight is

    sigma * (delta_i - mean delta_i) * g'(in_k) * presynaptic_activation,

with ``sigma`` the sign of the running correlation.  After training, each
neuron keeps its best candidate; its input-side weights are frozen.

Candidates are stored per host layer as one block of shape
(pool_size, neurons, ...) so a whole layer trains with a few matrix products.
For conv layers every output location counts as one sample.
"""

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .activations import activate, check_activation, derivative
from .errors import PerfBPError
from .grad import backprop
from .losses import loss_value, output_delta
from .network import DendriteRound, forward, to_rows


@dataclass
class CandidateSettings:
    pool_size: int = 4
    rate: float = 0.01
    patience: int = 5
    min_delta: float = 1e-4
    max_epochs: int = 100
    beta: float = 0.99
    batch_size: int = 64
    output_init: str = "zero"
    sigma_source: str = "error"
    activation: str | None = None
    bias: bool = False
    normalize_error: bool = True

    def __post_init__(self):
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        if self.patience < 1:
            raise ValueError("candidate patience must be >= 1")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must satisfy 0 <= beta < 1")
        if self.output_init not in ("zero", "random"):
            raise ValueError("output_init must be 'zero' or 'random'")
        if self.sigma_source not in ("error", "output"):
            raise ValueError("sigma_source must be 'error' or 'output'")
        if self.activation is not None:
            check_activation(self.activation)


# -- scalar/array formulas --------------------------------------------

def dendrite_delta(g_in_k, g_bar, delta_i, delta_bar):
    """Per-sample covariance term between candidate activation and host error."""
    return (g_in_k - g_bar) * (delta_i - delta_bar)


def dendrite_error_signal(sigma, delta_i, delta_bar, g_prime_in_k):
    return sigma * (delta_i - delta_bar) * g_prime_in_k


def dendrite_weight_grad(sigma, delta_i, delta_bar, g_prime_in_k, presyn_activation):
    """Ascent direction for one input weight, summed over a leading sample axis if present."""
    prod = dendrite_error_signal(sigma, delta_i, delta_bar, g_prime_in_k) * presyn_activation
    prod = np.asarray(prod, dtype=np.float64)
    return prod.sum(axis=0) if prod.ndim else float(prod)


# -- running statistics -----------------------------------------------

@dataclass
class RunningStats:
    """Exponential moving averages kept while candidates train.

    ``g_bar`` and ``d_bar`` are the running activation and host-delta means,
    ``cov`` the running mean of the covariance term, ``d_var`` the running
    variance of the host delta and ``sigma`` the sign of the tracked
    correlation (sign(0) = +1).  Everything starts from the first batch.
    """

    beta: float = 0.99
    g_bar: np.ndarray | float | None = None
    d_bar: np.ndarray | float | None = None
    cov: np.ndarray | float | None = None
    d_var: np.ndarray | float | None = None
    y_bar: np.ndarray | float | None = None
    cov_out: np.ndarray | float | None = None
    sigma: np.ndarray | float = 1.0

    def _ema(self, old, new):
        return new if old is None else self.beta * old + (1.0 - self.beta) * new


def update_running_averages(state, batch_activations, batch_deltas, batch_outputs=None,
                            sigma_source="error"):
    """Fold one batch (leading sample axis) into ``state`` and refresh ``sigma``."""
    g = np.asarray(batch_activations)
    d = np.asarray(batch_deltas)
    if g.shape[0] == 0:
        raise ValueError("empty batch")
    state.g_bar = state._ema(state.g_bar, g.mean(axis=0))
    state.d_bar = state._ema(state.d_bar, d.mean(axis=0))
    state.cov = state._ema(state.cov, dendrite_delta(g, state.g_bar, d, state.d_bar).mean(axis=0))
    state.d_var = state._ema(state.d_var, ((d - state.d_bar) ** 2).mean(axis=0))
    tracked = state.cov
    if sigma_source == "output":
        if batch_outputs is None:
            raise ValueError("sigma_source='output' needs host outputs")
        y = np.asarray(batch_outputs)
        state.y_bar = state._ema(state.y_bar, y.mean(axis=0))
        state.cov_out = state._ema(state.cov_out, ((g - state.g_bar) * (y - state.y_bar)).mean(axis=0))
        tracked = state.cov_out
    state.sigma = np.where(np.asarray(tracked) >= 0, 1.0, -1.0)
    return state


class PearsonAccumulator:
    """Streaming Pearson correlation over a leading sample axis (Chan et al. merge).

    Works element-wise on any trailing shape, so one accumulator tracks every
    candidate of a layer at once.
    """

    def __init__(self):
        self.n = 0
        self.mx = self.my = self.sxx = self.syy = self.sxy = 0.0

    def add(self, x, y):
        x = np.asarray(x)
        y = np.broadcast_to(np.asarray(y), x.shape)
        nb = x.shape[0]
        if nb == 0:
            return
        # moments accumulate in float64 whatever the input precision
        bx, by = x.mean(axis=0, dtype=np.float64), y.mean(axis=0, dtype=np.float64)
        cx, cy = x - bx.astype(x.dtype), y - by.astype(y.dtype)
        bxx = (cx * cx).sum(axis=0, dtype=np.float64)
        byy = (cy * cy).sum(axis=0, dtype=np.float64)
        bxy = (cx * cy).sum(axis=0, dtype=np.float64)
        if self.n == 0:
            self.n, self.mx, self.my = nb, bx, by
            self.sxx, self.syy, self.sxy = bxx, byy, bxy
            return
        n = self.n + nb
        dx, dy = bx - self.mx, by - self.my
        w = self.n * nb / n
        self.mx = self.mx + dx * nb / n
        self.my = self.my + dy * nb / n
        self.sxx = self.sxx + bxx + dx * dx * w
        self.syy = self.syy + byy + dy * dy * w
        self.sxy = self.sxy + bxy + dx * dy * w
        self.n = n

    def correlation(self):
        """|r|, with 0 wherever either stream is (numerically) constant."""
        sxx, syy = np.asarray(self.sxx), np.asarray(self.syy)
        flat_x = sxx <= (1e-12 * np.abs(self.mx)) ** 2 * max(self.n, 1)
        flat_y = syy <= (1e-12 * np.abs(self.my)) ** 2 * max(self.n, 1)
        flat = flat_x | flat_y | (sxx == 0) | (syy == 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.abs(self.sxy) / np.sqrt(sxx * syy)
        r = np.where(flat, 0.0, np.minimum(r, 1.0))
        return r if r.ndim else float(r)


def correlation_score(epoch_activations, epoch_deltas):
    """|Pearson r| between activations and host deltas along axis 0."""
    g = np.asarray(epoch_activations, dtype=np.float64)
    if g.shape[0] < 2:
        raise ValueError("correlation needs at least 2 samples")
    acc = PearsonAccumulator()
    acc.add(g, epoch_deltas)
    return acc.correlation()


# -- candidate pools --------------------------------------------------

@dataclass
class CandidateBlock:
    """All candidates of one host layer: arrays lead with (pool_size, neurons)."""

    layer: int
    activation: str
    input_weights: np.ndarray
    sibling_weights: np.ndarray
    bias: np.ndarray | None
    stats: RunningStats
    score: np.ndarray
    best_score: np.ndarray
    best_epoch: np.ndarray
    since_best: np.ndarray
    best_input: np.ndarray
    best_sibling: np.ndarray
    best_bias: np.ndarray | None

    @property
    def pool_size(self):
        return self.input_weights.shape[0]

    @property
    def width(self):
        return self.input_weights.shape[1]


@dataclass
class CandidateState:
    """Per-candidate view into a :class:`CandidateBlock` (weights are live views)."""

    host: tuple
    index: int
    input_weights: np.ndarray
    sibling_weights: np.ndarray
    g_bar: float | None
    delta_bar: float | None
    sigma: float
    correlation_score: float
    best_score_epoch: int


@dataclass
class CandidatePool:
    blocks: dict
    pool_size: int
    seed: int
    consumed: bool = False

    def candidates(self):
        out = []
        for i, b in self.blocks.items():
            for j in range(b.width):
                for p in range(b.pool_size):
                    st = b.stats
                    out.append(CandidateState(
                        host=(i, j), index=p,
                        input_weights=b.input_weights[p, j],
                        sibling_weights=b.sibling_weights[p, j],
                        g_bar=None if st.g_bar is None else float(np.broadcast_to(st.g_bar, b.score.shape)[p, j]),
                        delta_bar=None if st.d_bar is None else float(np.reshape(st.d_bar, -1)[j]),
                        sigma=float(np.broadcast_to(st.sigma, b.score.shape)[p, j]),
                        correlation_score=float(b.best_score[p, j]),
                        best_score_epoch=int(b.best_epoch[p, j]),
                    ))
        return out

    def __len__(self):
        return sum(b.pool_size * b.width for b in self.blocks.values())


def spawn_candidates(net, pool_size, seed, layers=None, settings=None):
    """Give every neuron of the chosen host layers ``pool_size`` fresh candidates.

    Candidates are wired to the host's presynaptic inputs plus every existing
    dendrite of that host.  Trial weights are uniform in +-1/sqrt(fan_in),
    where fan_in counts both the host inputs and those sibling inputs; each
    pool member draws from its own seed stream.
    """
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    settings = settings or CandidateSettings(pool_size=pool_size)
    hosts = net.host_layers() if layers is None else list(layers)
    if not hosts:
        raise PerfBPError("network has no dendrite-hosting layers")
    blocks = {}
    for i in hosts:
        wshape = net.weight_shape(i)
        m, T = wshape[0], len(net.dendrites[i])
        bound = 1.0 / np.sqrt(net.fan_in(i) + T)
        inp = np.empty((pool_size, *wshape), dtype=net.dtype)
        sib = np.empty((pool_size, m, T), dtype=net.dtype)
        bias = np.empty((pool_size, m), dtype=net.dtype) if settings.bias else None
        for p in range(pool_size):
            rng = np.random.default_rng(np.random.SeedSequence([seed, i, p]))
            inp[p] = rng.uniform(-bound, bound, size=wshape)
            sib[p] = rng.uniform(-bound, bound, size=(m, T))
            if bias is not None:
                bias[p] = rng.uniform(-bound, bound, size=m)
        blocks[i] = CandidateBlock(
            layer=i,
            activation=settings.activation or net.layers[i].activation,
            input_weights=inp,
            sibling_weights=sib,
            bias=bias,
            stats=RunningStats(beta=settings.beta),
            score=np.zeros((pool_size, m)),
            best_score=np.zeros((pool_size, m)),
            best_epoch=np.zeros((pool_size, m), dtype=np.int64),
            since_best=np.zeros((pool_size, m), dtype=np.int64),
            best_input=inp.copy(),
            best_sibling=sib.copy(),
            best_bias=None if bias is None else bias.copy(),
        )
    return CandidatePool(blocks=blocks, pool_size=pool_size, seed=seed)


def candidate_forward(block, rows, sibling_acts):
    """Pre-activations and activations, shaped (rows, pool, neurons)."""
    P, m = block.pool_size, block.width
    N = rows.shape[0]
    pre = (rows @ block.input_weights.reshape(P * m, -1).T).reshape(N, P, m)
    if sibling_acts:
        S = np.stack(sibling_acts, axis=-1)
        pre += np.einsum("nmt,pmt->npm", S, block.sibling_weights)
    if block.bias is not None:
        pre += block.bias
    return pre, activate(block.activation, pre)


@contextlib.contextmanager
def frozen_neurons(net):
    """Make every neuron weight/bias read-only for the duration."""
    arrays = [a for _, a in net.neuron_arrays()]
    flags = [a.flags.writeable for a in arrays]
    for a in arrays:
        a.flags.writeable = False
    try:
        yield
    finally:
        for a, f in zip(arrays, flags):
            a.flags.writeable = f


def _batch_order(n, batch_size, seed, epoch):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0CA, epoch]))
    perm = rng.permutation(n)
    return [perm[s:s + batch_size] for s in range(0, n, batch_size)]


def _ascent_step(block, rows, sibling_acts, D, host_out, settings):
    pre, g = candidate_forward(block, rows, sibling_acts)
    N, P, m = pre.shape
    D3 = D[:, None, :]
    update_running_averages(
        block.stats, g, D3, None if host_out is None else host_out[:, None, :],
        sigma_source=settings.sigma_source,
    )
    st = block.stats
    E = dendrite_error_signal(st.sigma, D3, st.d_bar, derivative(block.activation, pre, g))
    if settings.normalize_error:
        # a host with constant error has nothing to correlate with
        sd = np.broadcast_to(np.sqrt(st.d_var), E.shape)
        E = np.divide(E, sd, out=np.zeros(E.shape, dtype=np.result_type(E, sd)), where=sd > 0)
    E = E.astype(rows.dtype, copy=False)
    E2 = E.reshape(N, P * m)
    step = settings.rate / N
    block.input_weights += step * (E2.T @ rows).reshape(block.input_weights.shape)
    if sibling_acts:
        S = np.stack(sibling_acts, axis=-1)
        block.sibling_weights += step * np.einsum("npm,nmt->pmt", E, S)
    if block.bias is not None:
        block.bias += step * E.sum(axis=0)
    return g, D3


def train_candidates(pool, net, inputs, targets, loss, settings=None, seed=0,
                     backprop_mode="perforated", on_epoch=None):
    """Train every candidate of ``pool`` to correlate with its host's error.

    Per mini-batch: forward pass without dropout, a backward pass in
    ``backprop_mode`` for the host deltas, then one ascent step on every
    candidate.  An epoch's score for a candidate is |Pearson r| between its
    activations and its host's deltas over that epoch.  Training stops once
    no candidate has improved its best score by more than ``min_delta`` for
    ``patience`` epochs (or at ``max_epochs``).  Neuron parameters are
    read-only throughout.

    Returns the per-epoch history: ``[{"epoch", "loss", "scores": {layer: (P, m)}}]``.
    """
    settings = settings or CandidateSettings(pool_size=pool.pool_size)
    if pool.consumed:
        raise PerfBPError("candidate pool was already promoted")
    inputs = np.asarray(inputs)
    n = inputs.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    history = []
    with frozen_neurons(net):
        for epoch in range(1, settings.max_epochs + 1):
            accs = {i: PearsonAccumulator() for i in pool.blocks}
            total_loss = 0.0
            for idx in _batch_order(n, settings.batch_size, seed, epoch):
                xb, yb = inputs[idx], targets[idx]
                out, cache = forward(net, xb, "eval")
                total_loss += loss_value(loss, out, yb) * len(idx)
                buf = backprop(net, cache, output_delta(loss, out, yb), mode=backprop_mode,
                               param_grads=False)
                for i, block in pool.blocks.items():
                    D = to_rows(buf.deltas[i])
                    host_out = to_rows(cache.post[i]) if settings.sigma_source == "output" else None
                    g, D3 = _ascent_step(block, cache.rows[i], cache.dendrite_post[i], D, host_out, settings)
                    accs[i].add(g, D3)
            scores = {}
            all_stale = True
            for i, block in pool.blocks.items():
                block.score = np.asarray(accs[i].correlation())
                improved = block.score > block.best_score + settings.min_delta
                if epoch == 1:
                    improved = np.ones_like(improved)
                block.best_score = np.where(improved, block.score, block.best_score)
                block.best_epoch = np.where(improved, epoch, block.best_epoch)
                block.since_best = np.where(improved, 0, block.since_best + 1)
                block.best_input[improved] = block.input_weights[improved]
                block.best_sibling[improved] = block.sibling_weights[improved]
                if block.bias is not None:
                    block.best_bias[improved] = block.bias[improved]
                scores[i] = block.score.copy()
                all_stale &= bool(np.all(block.since_best >= settings.patience))
            record = {"epoch": epoch, "loss": total_loss / n, "scores": scores}
            history.append(record)
            if on_epoch is not None:
                on_epoch(record)
            if all_stale:
                break
    return pool, history


def promote_best(pool, net, output_init="zero", birth_cycle=0, frozen=True, seed=0):
    """Attach each neuron's highest-scoring candidate (ties: lowest index) as a dendrite.

    The promoted weights are the candidate's best-epoch snapshot.  With
    ``output_init="zero"`` the network's outputs are unchanged.  Returns one
    report row per neuron.
    """
    if pool.consumed:
        raise PerfBPError("candidate pool was already promoted")
    report = []
    for i, block in pool.blocks.items():
        m = block.width
        choice = np.argmax(block.best_score, axis=0)
        cols = np.arange(m)
        if output_init == "zero":
            out_w = np.zeros(m, dtype=net.dtype)
        elif output_init == "random":
            bound = 1.0 / np.sqrt(net.fan_in(i) + len(net.dendrites[i]) + 1)
            out_w = np.random.default_rng(np.random.SeedSequence([seed, i, 0x0E7])).uniform(-bound, bound, m).astype(net.dtype)
        else:
            raise ValueError(f"unknown output_init {output_init!r}")
        rnd = DendriteRound(
            input_weights=block.best_input[choice, cols].copy(),
            sibling_weights=block.best_sibling[choice, cols].copy(),
            output_weights=out_w,
            activation=block.activation,
            birth_cycle=birth_cycle,
            frozen=frozen,
            bias=None if block.best_bias is None else block.best_bias[choice, cols].copy(),
        )
        net.add_dendrite_round(i, rnd)
        for j in range(m):
            report.append({"layer": i, "neuron": j, "candidate": int(choice[j]),
                           "score": float(block.best_score[choice[j], j])})
    pool.consumed = True
    return report
