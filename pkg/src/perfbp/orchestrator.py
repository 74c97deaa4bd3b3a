"""Alternating neuron and dendrite cycles, scoring and experiment-level stopping.

An experiment starts with a neuron cycle.  Each following dendrite cycle
freezes the neurons, trains candidate dendrites and promotes the best ones;
the next neuron cycle trains neurons and dendrite output weights.  The run
stops when a neuron cycle's best validation score does not strictly exceed
the previous one (its new dendrites are discarded) or when the round limit
is reached.

Every random stream is derived from the experiment seed with
``np.random.SeedSequence``, so a config reproduces a report bit for bit.
"""

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .config import dump_config, preset_layers
from .data import (Dataset, SplitSpec, batches, gen_two_spirals, gen_xor_quadrants,
                   load_csv, load_idx, load_mnist5k, split)
from .dendrites import promote_best, spawn_candidates, train_candidates
from .errors import ConfigError, DataError, NonFiniteError
from .grad import backprop
from .losses import loss_value, output_delta, softmax
from .network import Network, forward, param_count
from .optim import make_optimizer
from .store import (CheckpointStore, MetricsLog, MetricsRecord, TrainingState,
                    decode_checkpoint, encode_checkpoint)

# seed stream tags
_INIT, _SHUFFLE, _DROPOUT, _CANDIDATES, _PROMOTE = 1, 2, 3, 4, 5


def derive_seed(master, *tags):
    return int(np.random.SeedSequence([master, *tags]).generate_state(1)[0])


# -- scoring ----------------------------------------------------------

def _binary_scores(outputs):
    if outputs.shape[1] == 1:
        return outputs[:, 0]
    return softmax(outputs)[:, 1]


def auc_score(scores, positives):
    """Area under the ROC curve via the rank-sum statistic (ties get average ranks)."""
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5
    ranks = rankdata(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def score_outputs(outputs, labels, metric="accuracy"):
    """Accuracy or AUC of raw network outputs.

    A single output column is a binary score thresholded at 0.5.  Multi-class
    AUC is the unweighted one-vs-rest mean.
    """
    labels = np.asarray(labels)
    if metric == "accuracy":
        if outputs.shape[1] == 1:
            pred = (outputs[:, 0] > 0.5).astype(np.int64)
        else:
            pred = outputs.argmax(axis=1)
        return float((pred == labels).mean())
    if metric == "auc":
        if outputs.shape[1] <= 2:
            return auc_score(_binary_scores(outputs), labels == 1)
        probs = softmax(outputs)
        present = [c for c in range(outputs.shape[1]) if 0 < (labels == c).sum() < len(labels)]
        return float(np.mean([auc_score(probs[:, c], labels == c) for c in present]))
    raise ValueError(f"unknown score metric {metric!r}")


def loss_targets(loss, labels, width):
    """Labels as the loss expects them: class ids, or one-hot / scalar targets for mse."""
    labels = np.asarray(labels)
    if loss == "mse":
        if labels.dtype.kind == "f":
            return labels.reshape(len(labels), -1)
        if width == 1:
            return labels.astype(np.float64)[:, None]
        return np.eye(width)[labels]
    return labels


def predict(net, inputs, batch_size=1000):
    outs = [forward(net, inputs[s:s + batch_size], "eval")[0] for s in range(0, len(inputs), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0, net.output_shape[0]))


def evaluate(net, ds, metric="accuracy", batch_size=1000):
    return score_outputs(predict(net, ds.inputs, batch_size), ds.labels, metric)


def quartiles_nearest_rank(values):
    """(min, q1, q3, max); the q-quantile is the ceil(q * n)-th smallest value."""
    v = sorted(values)
    if not v:
        raise ValueError("no values")
    n = len(v)

    def rank(q):
        return v[max(1, math.ceil(q * n)) - 1]

    return v[0], rank(0.25), rank(0.75), v[-1]


# -- records ----------------------------------------------------------

@dataclass
class CycleRecord:
    """One cycle.  ``epochs`` holds dicts with epoch, train_score, val_score, test_score."""

    cycle_index: int
    kind: str
    epochs: list = field(default_factory=list)
    best_val_epoch: int = 1
    cycle_val_score: float = float("nan")
    cycle_test_score: float | None = None
    checkpoint_id: str | None = None
    start_val_score: float | None = None
    promotion: list | None = None
    digests: dict = field(default_factory=dict)
    seconds: float = 0.0

    def to_dict(self, include_timing=True):
        d = asdict(self)
        if not include_timing:
            d.pop("seconds")
        return d


@dataclass
class ExperimentReport:
    experiment_id: str
    seed: int
    split_seed: int
    ablation_mode: str
    cycles: list
    first_cycle_test: float | None
    max_val_test: float | None
    final_cycle_test: float | None
    error_reduction_pct: float | None
    dendrites_added: int
    dendrite_nodes: int
    neuron_params: int
    dendrite_params: int
    final_checkpoint_id: str | None
    discarded_round: bool = False

    def to_dict(self, include_timing=False):
        d = {k: v for k, v in asdict(self).items() if k != "cycles"}
        d["cycles"] = [c.to_dict(include_timing) for c in self.cycles]
        return d

    def timing(self):
        return {f"{c.cycle_index}:{c.kind}": c.seconds for c in self.cycles}

    def summary(self):
        def pct(v):
            return "n/a" if v is None else f"{100 * v:.2f}%"

        err = "n/a" if self.error_reduction_pct is None else f"{self.error_reduction_pct:.2f}%"
        return (f"experiment {self.experiment_id} ({self.ablation_mode}, seed {self.seed})\n"
                f"  first-cycle test : {pct(self.first_cycle_test)}\n"
                f"  max-val test     : {pct(self.max_val_test)}\n"
                f"  error reduction  : {err}\n"
                f"  dendrites added  : {self.dendrites_added} round(s), {self.dendrite_nodes} node(s)\n"
                f"  parameters       : {self.neuron_params} neuron + {self.dendrite_params} dendrite")


def error_reduction(first_score, final_score):
    first_err, final_err = 1.0 - first_score, 1.0 - final_score
    if first_err == 0:
        return 0.0
    return 100.0 * (first_err - final_err) / first_err


def experiment_score(records):
    """(test score at the global best-val epoch, error reduction vs the first cycle).

    Ties in validation go to the earliest epoch.  When test was not evaluated
    every epoch, the cycle's test score stands in at its best-val epoch.
    """
    neuron = [r for r in records if r.kind == "neuron"]
    if not neuron:
        raise ValueError("need at least one neuron cycle")
    best_val, best_test = -math.inf, None
    for r in records:
        for e in r.epochs:
            if e["val_score"] is not None and e["val_score"] > best_val:
                best_val = e["val_score"]
                best_test = e["test_score"]
                if best_test is None and e["epoch"] == r.best_val_epoch:
                    best_test = r.cycle_test_score
    first = neuron[0].cycle_test_score
    if best_test is None or first is None:
        return best_test, None
    return best_test, error_reduction(first, best_test)


# -- run context ------------------------------------------------------

class MemoryStore:
    """Checkpoint store that keeps encoded blobs in memory."""

    def __init__(self):
        self.blobs = {}

    def save(self, state):
        blob, cid = encode_checkpoint(state)
        self.blobs[cid] = blob
        return cid

    def load(self, cid):
        return decode_checkpoint(self.blobs[cid], expected_id=cid)


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset | None = None

    def check(self):
        for name in ("train", "val"):
            if len(getattr(self, name)) == 0:
                raise DataError(f"{name} split is empty")
        if self.test is not None and len(self.test) == 0:
            raise DataError("test split is empty")


class RunContext:
    """Config, data, seeds, storage and logging shared by the cycles of one experiment."""

    def __init__(self, config, splits, run_dir=None, experiment_id=None, log=print):
        self.config = config
        self.splits = splits
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.experiment_id = experiment_id or f"{config.name}-{config.ablation_mode}-s{config.seed}"
        self.store = CheckpointStore(self.run_dir / "checkpoints") if self.run_dir else MemoryStore()
        self.metrics = MetricsLog(self.run_dir / "metrics.jsonl") if self.run_dir else None
        self.metric_records = []
        self.log = log or (lambda *a, **k: None)
        splits.check()

    @property
    def seed(self):
        return self.config.seed

    def backprop_mode(self):
        mode = self.config.ablation_mode
        if mode == "cc_no_perforation":
            return "standard"
        if mode == "gd_dendrites":
            return "gd_dendrites"
        return "perforated"

    def host_layers(self, net):
        hosts = net.host_layers()
        mode = self.config.ablation_mode
        if mode == "baseline_no_dendrites":
            raise ConfigError("ablation mode baseline_no_dendrites does not allow dendrite cycles")
        if mode == "only_head":
            return hosts[-1:]
        if mode == "only_backbone":
            return hosts[:-1]
        return hosts

    def targets(self, ds, width):
        return loss_targets(self.config.loss, ds.labels, width)

    def record_epoch(self, cycle_index, kind, epoch, train, val, test, loss=None,
                     candidate_scores=None, seconds=0.0):
        rec = MetricsRecord(self.experiment_id, cycle_index, kind, epoch, train, val, test,
                            loss, candidate_scores, seconds)
        self.metric_records.append(rec)
        if self.metrics is not None:
            self.metrics.append(rec)

    def checkpoint(self, net, cycle_index, extra=None):
        state = TrainingState(
            net=net,
            optimizer_kind=self.config.optimizer.kind,
            rng={"master_seed": self.seed, "stream": "SeedSequence([seed, tag, cycle, ...])"},
            cycle_index=cycle_index,
            metadata={"experiment_id": self.experiment_id, **(extra or {})},
        )
        return self.store.save(state)


def state_digest(net):
    h = hashlib.sha256()
    for name, arr in net.named_arrays():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


# -- cycles -----------------------------------------------------------

def run_neuron_cycle(net, splits, config, cycle_index=0, ctx=None):
    """Train neuron weights/biases and dendrite output weights until validation stalls.

    Stops after ``patience`` epochs without a strict val improvement (or after
    ``fixed_epochs``), then restores the best-val parameters.
    """
    ctx = ctx or RunContext(config, splits, log=None)
    cfg = ctx.config
    splits.check()
    width = net.output_shape[0]
    y_train = ctx.targets(splits.train, width)
    mode = ctx.backprop_mode()
    opt = make_optimizer(cfg.optimizer)
    rec = CycleRecord(cycle_index=cycle_index, kind="neuron")
    rec.digests["dendrite_inputs_start"] = net.dendrite_input_digest()
    if cycle_index > 0:
        rec.start_val_score = evaluate(net, splits.val, cfg.score_metric, cfg.eval_batch_size)
    shuffle_seed = derive_seed(cfg.seed, _SHUFFLE, cycle_index)
    best_val, best_net, best_epoch, since = -math.inf, None, 0, 0
    limit = cfg.fixed_epochs or cfg.max_epochs
    t_cycle = time.perf_counter()
    for epoch in range(1, limit + 1):
        t0 = time.perf_counter()
        lr = cfg.optimizer.lr_at(epoch)
        total_loss, outs = 0.0, []
        order = batches(len(splits.train), cfg.batch_size, shuffle_seed, epoch)
        for b, idx in enumerate(order):
            xb, yb = splits.train.inputs[idx], y_train[idx]
            out, cache = forward(net, xb, "train", rng_seed=derive_seed(cfg.seed, _DROPOUT, cycle_index, epoch, b))
            lv = loss_value(cfg.loss, out, yb)
            if not math.isfinite(lv):
                raise NonFiniteError(f"non-finite loss in cycle {cycle_index}, epoch {epoch}, batch {b}")
            total_loss += lv * len(idx)
            outs.append((idx, out))
            buf = backprop(net, cache, output_delta(cfg.loss, out, yb), mode=mode)
            params = net.trainable()
            opt.step(params, {k: g / len(idx) for k, g in buf.grads.items() if k in params}, lr)
        # running train score from the training passes (dropout on, shuffled)
        out_all = np.empty((len(splits.train), width))
        for idx, out in outs:
            out_all[idx] = out
        train_score = score_outputs(out_all, splits.train.labels, cfg.score_metric)
        val_score = evaluate(net, splits.val, cfg.score_metric, cfg.eval_batch_size)
        test_score = None
        if cfg.evaluate_test_each_epoch and splits.test is not None:
            test_score = evaluate(net, splits.test, cfg.score_metric, cfg.eval_batch_size)
        rec.epochs.append({"epoch": epoch, "train_score": train_score, "val_score": val_score,
                           "test_score": test_score})
        seconds = time.perf_counter() - t0
        ctx.record_epoch(cycle_index, "neuron", epoch, train_score, val_score, test_score,
                         total_loss / len(splits.train), seconds=seconds)
        if val_score > best_val:
            best_val, best_epoch, since = val_score, epoch, 0
            best_net = net.copy()
        else:
            since += 1
        if cfg.fixed_epochs is None and since >= cfg.patience:
            break
    net.load_arrays_from(best_net)
    rec.best_val_epoch = best_epoch
    rec.cycle_val_score = best_val
    if splits.test is not None:
        if cfg.evaluate_test_each_epoch:
            rec.cycle_test_score = rec.epochs[best_epoch - 1]["test_score"]
        else:
            rec.cycle_test_score = evaluate(net, splits.test, cfg.score_metric, cfg.eval_batch_size)
    rec.digests["dendrite_inputs_end"] = net.dendrite_input_digest()
    rec.digests["best_state"] = state_digest(net)
    rec.checkpoint_id = ctx.checkpoint(net, cycle_index, {"kind": "neuron", "best_val_epoch": best_epoch,
                                                          "val_score": best_val,
                                                          "score_metric": cfg.score_metric})
    rec.seconds = time.perf_counter() - t_cycle
    ctx.log(f"[{ctx.experiment_id}] cycle {cycle_index} neuron: {len(rec.epochs)} epochs, "
            f"best val {best_val:.4f} at epoch {best_epoch}, test {rec.cycle_test_score}")
    return rec


def run_dendrite_cycle(net, splits, config, cycle_index=1, ctx=None, previous=None):
    """Freeze neurons, train a candidate pool per host neuron and promote the best.

    Val/test are flat across the phase (the model does not change while
    candidates train).  In ``gd_dendrites`` mode no candidate training takes
    place: fresh random dendrites are attached with trainable input weights.
    Returns ``(record, promotion_report)``.
    """
    ctx = ctx or RunContext(config, splits, log=None)
    cfg = ctx.config
    hosts = ctx.host_layers(net)
    if not hosts:
        raise ConfigError(f"ablation mode {cfg.ablation_mode} leaves no layer to host dendrites")
    width = net.output_shape[0]
    y_train = ctx.targets(splits.train, width)
    rec = CycleRecord(cycle_index=cycle_index, kind="dendrite")
    rec.digests["start_state"] = state_digest(net)
    rec.digests["neurons_start"] = net.neuron_digest()
    if previous is not None:
        best = previous.epochs[previous.best_val_epoch - 1]
        flat = (best["train_score"], previous.cycle_val_score, previous.cycle_test_score)
    else:
        flat = (None, evaluate(net, splits.val, cfg.score_metric, cfg.eval_batch_size),
                evaluate(net, splits.test, cfg.score_metric, cfg.eval_batch_size) if splits.test else None)
    rec.cycle_val_score, rec.cycle_test_score = flat[1], flat[2]
    cand = cfg.candidates
    seed = derive_seed(cfg.seed, _CANDIDATES, cycle_index)
    t_cycle = time.perf_counter()
    pool = spawn_candidates(net, cand.pool_size, seed, layers=hosts, settings=cand)
    if cfg.ablation_mode == "gd_dendrites":
        epochs = [{"epoch": 1, "loss": None, "scores": {}}]
    else:
        epochs = []
        timer = [time.perf_counter()]

        def on_epoch(h):
            now = time.perf_counter()
            epochs.append(h)
            scores = {str(i): float(np.max(s)) for i, s in h["scores"].items()}
            ctx.record_epoch(cycle_index, "dendrite", h["epoch"], flat[0], flat[1], flat[2],
                             h["loss"], candidate_scores=scores, seconds=now - timer[0])
            timer[0] = now

        train_candidates(pool, net, splits.train.inputs, y_train, cfg.loss, settings=cand,
                         seed=seed, backprop_mode="standard" if cfg.ablation_mode == "cc_no_perforation"
                         else "perforated", on_epoch=on_epoch)
    rec.digests["neurons_end"] = net.neuron_digest()
    report = promote_best(pool, net, output_init=cand.output_init, birth_cycle=cycle_index,
                          frozen=cfg.ablation_mode != "gd_dendrites",
                          seed=derive_seed(cfg.seed, _PROMOTE, cycle_index))
    if cfg.ablation_mode == "gd_dendrites":
        ctx.record_epoch(cycle_index, "dendrite", 1, flat[0], flat[1], flat[2], None, seconds=0.0)
    for h in epochs:
        rec.epochs.append({"epoch": h["epoch"], "train_score": flat[0], "val_score": flat[1],
                           "test_score": flat[2]})
    rec.best_val_epoch = 1
    rec.promotion = report
    rec.seconds = time.perf_counter() - t_cycle
    rec.digests["promoted_state"] = state_digest(net)
    ctx.log(f"[{ctx.experiment_id}] cycle {cycle_index} dendrite: {len(rec.epochs)} epochs, "
            f"{len(report)} dendrites on layers {hosts}, mean score "
            f"{np.mean([r['score'] for r in report]):.3f}")
    return rec, report


# -- experiments ------------------------------------------------------

def load_splits(config):
    """Build (train, val, test) for ``config.data``; the split seed defaults to the experiment seed."""
    d = config.data
    split_seed = d.split.seed if d.split.seed is not None else config.seed
    explicit_test = None
    try:
        if d.kind == "mnist5k":
            ds = load_mnist5k(d.images)
        elif d.kind in ("idx", "emnist"):
            if not (d.images and d.labels):
                raise ConfigError(f"data.kind {d.kind!r} needs data.images and data.labels")
            # raw EMNIST files store images transposed
            transpose = d.kind == "emnist" if d.transpose is None else d.transpose
            ds = load_idx(d.images, d.labels, transpose=transpose, name=d.kind)
            if d.test_images and d.test_labels:
                explicit_test = load_idx(d.test_images, d.test_labels, transpose=transpose, name="test")
        elif d.kind == "csv":
            if not d.csv_path:
                raise ConfigError("data.kind 'csv' needs data.csv_path")
            ds = load_csv(d.csv_path, d.label_column, d.feature_columns)
        elif d.kind == "two_spirals":
            ds = gen_two_spirals(d.n_per_class, d.noise, d.data_seed)
        else:
            ds = gen_xor_quadrants(d.n, d.data_seed, d.margin)
    except OSError as exc:
        raise DataError(f"cannot read dataset: {exc}") from exc
    if d.max_samples is not None and d.max_samples < len(ds):
        keep = np.sort(np.random.default_rng(np.random.SeedSequence([split_seed, 0x5A3])).permutation(len(ds))[:d.max_samples])
        ds = ds.subset(keep)
    if explicit_test is not None:
        # the separate test set stands in for the test fraction; val is carved
        # from the training file (10% by default)
        spec = SplitSpec(1.0 - d.split.val, d.split.val, 0.0, split_seed, d.split.stratified)
        train, val, _ = split(ds, spec)
        explicit_test.class_count = max(explicit_test.class_count, ds.class_count)
        test = explicit_test
    else:
        try:
            spec = SplitSpec(d.split.train, d.split.val, d.split.test, split_seed, d.split.stratified)
        except ValueError as exc:
            raise ConfigError(f"data.split: {exc}") from exc
        train, val, test = split(ds, spec)
    return Splits(train, val, test), split_seed


def build_network(config, splits):
    layers = preset_layers(config.model, splits.train.class_count)
    return Network(layers, splits.train.inputs.shape[1:], seed=derive_seed(config.seed, _INIT),
                   dtype=config.dtype)


def run_experiment(config, splits=None, run_dir=None, experiment_id=None, log=print, net=None):
    """Alternate cycles until validation stops improving; returns an ExperimentReport.

    With ``run_dir`` the resolved config, per-epoch metrics, checkpoints, the
    report and a separate timing file are written there.
    """
    split_seed = config.seed
    if splits is None:
        splits, split_seed = load_splits(config)
    ctx = RunContext(config, splits, run_dir, experiment_id, log)
    if ctx.run_dir is not None:
        ctx.run_dir.mkdir(parents=True, exist_ok=True)
        (ctx.run_dir / "config.yaml").write_text(dump_config(config))
    net = net if net is not None else build_network(config, splits)
    records = []
    cycle = 0
    rec = run_neuron_cycle(net, splits, config, cycle, ctx)
    records.append(rec)
    best_net, best_rec, kept_rounds, discarded = net.copy(), rec, 0, False
    rounds = 0
    if config.ablation_mode != "baseline_no_dendrites":
        while rounds < config.max_dendrite_rounds:
            cycle += 1
            drec, _ = run_dendrite_cycle(net, splits, config, cycle, ctx, previous=best_rec)
            records.append(drec)
            rounds += 1
            cycle += 1
            nrec = run_neuron_cycle(net, splits, config, cycle, ctx)
            records.append(nrec)
            if nrec.cycle_val_score > best_rec.cycle_val_score:
                best_net, best_rec, kept_rounds = net.copy(), nrec, rounds
            else:
                net.load_arrays_from(best_net)
                discarded = True
                break
    max_val_test, err = experiment_score(records)
    neuron_params, dendrite_params = param_count(net)
    report = ExperimentReport(
        experiment_id=ctx.experiment_id,
        seed=config.seed,
        split_seed=split_seed,
        ablation_mode=config.ablation_mode,
        cycles=records,
        first_cycle_test=records[0].cycle_test_score,
        max_val_test=max_val_test,
        final_cycle_test=best_rec.cycle_test_score,
        error_reduction_pct=err,
        dendrites_added=kept_rounds,
        dendrite_nodes=net.num_dendrites(),
        neuron_params=neuron_params,
        dendrite_params=dendrite_params,
        final_checkpoint_id=best_rec.checkpoint_id,
        discarded_round=discarded,
    )
    report.final_net = net
    report.metrics = ctx.metric_records
    if ctx.run_dir is not None:
        write_report(report, ctx.run_dir)
    ctx.log(report.summary())
    return report


def write_report(report, run_dir):
    run_dir = Path(run_dir)
    (run_dir / "report.json").write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    (run_dir / "timing.json").write_text(json.dumps(report.timing(), sort_keys=True, indent=1) + "\n")
