"""Checkpoints and metrics logs.

Checkpoint file layout (``<id>.pbck``), all integers little-endian::

    offset  size  field
    0       4     magic b"PBCK"
    4       4     u32 format version
    8       8     u64 header length H
    16      H     UTF-8 JSON header (sorted keys, no whitespace)
    16+H    P     payload: float64 LE tensors, concatenated in header order
    16+H+P  32    SHA-256 of bytes [0, 16+H+P)

The header holds the architecture, the tensor table (name, shape, offset,
count), dendrite metadata (activation, birth cycle, frozen flag), optimizer
scalars, rng states, the cycle index and free-form metadata.  The hex digest
is the checkpoint id, so identical states get identical ids.

Metrics are JSON lines, one record per executed epoch.
"""

import hashlib
import io
import json
import struct
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .network import DendriteRound, Network, layer_from_dict, layer_to_dict

MAGIC = b"PBCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


@dataclass
class TrainingState:
    """Everything needed to resume: model, optimizer state, rng states, position."""

    net: Network
    optimizer_kind: str | None = None
    optimizer_state: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    cycle_index: int = 0
    metadata: dict = field(default_factory=dict)


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _optimizer_tensors(state):
    scalars, tensors = {}, []
    for key in sorted(state):
        val = state[key]
        if isinstance(val, dict):
            scalars[key] = sorted(val)
            for name in sorted(val):
                tensors.append((f"optimizer.{key}.{name}", np.asarray(val[name])))
        else:
            scalars[key] = val
    return scalars, tensors


def encode_checkpoint(state, version=FORMAT_VERSION):
    """Serialize a TrainingState; returns ``(bytes, checkpoint_id)``."""
    net = state.net
    tensors = list(net.named_arrays())
    opt_scalars, opt_tensors = _optimizer_tensors(state.optimizer_state)
    tensors += opt_tensors
    table, offset = [], 0
    for name, arr in tensors:
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor {name} is not finite")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += int(arr.size)
    header = {
        "format_version": version,
        "architecture": {
            "input_shape": list(net.input_shape),
            "dtype": net.dtype.name,
            "layers": [layer_to_dict(layer) for layer in net.layers],
        },
        "dendrites": [
            {"layer": i, "round": t, "activation": r.activation, "birth_cycle": r.birth_cycle,
             "frozen": bool(r.frozen), "bias": r.bias is not None}
            for i, rounds in enumerate(net.dendrites) for t, r in enumerate(rounds)
        ],
        "tensors": table,
        "optimizer": {"kind": state.optimizer_kind, "scalars": opt_scalars},
        "rng": state.rng,
        "cycle_index": int(state.cycle_index),
        "metadata": state.metadata,
    }
    head = _canonical(header)
    buf = io.BytesIO()
    buf.write(_PREFIX.pack(MAGIC, version, len(head)))
    buf.write(head)
    for _, arr in tensors:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = buf.getvalue()
    digest = hashlib.sha256(body).digest()
    return body + digest, digest.hex()


def decode_checkpoint(blob, expected_id=None):
    if len(blob) < _PREFIX.size + 32:
        raise CheckpointError("checkpoint truncated")
    body, digest = blob[:-32], blob[-32:]
    magic, version, hlen = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} != supported {FORMAT_VERSION}")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("digest mismatch: checkpoint is corrupted")
    if expected_id is not None and digest.hex() != expected_id:
        raise CheckpointError("digest mismatch: content does not match checkpoint id")
    header = json.loads(body[_PREFIX.size:_PREFIX.size + hlen])
    payload = np.frombuffer(body[_PREFIX.size + hlen:], dtype="<f8")
    arrays = {}
    for t in header["tensors"]:
        chunk = payload[t["offset"]:t["offset"] + t["count"]]
        if chunk.size != t["count"]:
            raise CheckpointError(f"payload too short for tensor {t['name']}")
        arrays[t["name"]] = chunk.astype(np.float64).reshape(t["shape"])

    arch = header["architecture"]
    dtype = np.dtype(arch.get("dtype", "float64"))
    # values were widened losslessly on save, so narrowing back is exact
    arrays = {k: v.astype(dtype) for k, v in arrays.items()}
    layers = [layer_from_dict(d) for d in arch["layers"]]
    params = []
    for i, _ in enumerate(layers):
        w = arrays.get(f"layers.{i}.weight")
        if w is None:
            params.append(None)
            continue
        p = {"weight": w}
        if f"layers.{i}.bias" in arrays:
            p["bias"] = arrays[f"layers.{i}.bias"]
        params.append(p)
    net = Network(layers, arch["input_shape"], params=params, dtype=dtype)
    for d in header["dendrites"]:
        base = f"layers.{d['layer']}.dendrites.{d['round']}"
        rnd = DendriteRound(
            input_weights=arrays[f"{base}.input"],
            sibling_weights=arrays[f"{base}.sibling"],
            output_weights=arrays[f"{base}.output"],
            activation=d["activation"],
            birth_cycle=d["birth_cycle"],
            frozen=d["frozen"],
            bias=arrays[f"{base}.bias"] if d["bias"] else None,
        )
        net.add_dendrite_round(d["layer"], rnd)

    opt = header["optimizer"]
    opt_state = {}
    for key, val in opt["scalars"].items():
        if isinstance(val, list) and all(f"optimizer.{key}.{n}" in arrays for n in val):
            opt_state[key] = {n: arrays[f"optimizer.{key}.{n}"] for n in val}
        else:
            opt_state[key] = val
    return TrainingState(net, opt["kind"], opt_state, header["rng"], header["cycle_index"],
                         header["metadata"])


class CheckpointStore:
    """Content-addressed checkpoints under ``root``."""

    suffix = ".pbck"

    def __init__(self, root):
        self.root = Path(root)

    def path(self, checkpoint_id):
        return self.root / f"{checkpoint_id}{self.suffix}"

    def save(self, state):
        blob, cid = encode_checkpoint(state)
        self.root.mkdir(parents=True, exist_ok=True)
        p = self.path(cid)
        if not p.exists():
            tmp = p.with_suffix(".tmp")
            try:
                tmp.write_bytes(blob)
                tmp.replace(p)
            except OSError as exc:
                raise CheckpointError(f"cannot write checkpoint: {exc}") from exc
        return cid

    def load(self, checkpoint_id):
        p = self.path(checkpoint_id)
        if not p.exists():
            raise CheckpointError(f"unknown checkpoint id {checkpoint_id!r}")
        return decode_checkpoint(p.read_bytes(), expected_id=checkpoint_id)

    def ids(self):
        return sorted(p.stem for p in self.root.glob(f"*{self.suffix}"))


def save_checkpoint(state, root):
    return CheckpointStore(root).save(state)


def load_checkpoint(checkpoint_id, root):
    return CheckpointStore(root).load(checkpoint_id)


def find_checkpoint(checkpoint_id, search_roots):
    """Locate a checkpoint id (or a unique prefix of one) below any of ``search_roots``."""
    hits = []
    for root in search_roots:
        root = Path(root)
        if root.exists():
            hits += [p for p in root.rglob(f"{checkpoint_id}*{CheckpointStore.suffix}")]
    ids = {p.stem for p in hits}
    if not ids:
        raise CheckpointError(f"unknown checkpoint id {checkpoint_id!r}")
    if len(ids) > 1:
        raise CheckpointError(f"checkpoint prefix {checkpoint_id!r} is ambiguous")
    p = hits[0]
    return p.stem, p.parent


# -- metrics ----------------------------------------------------------

@dataclass
class MetricsRecord:
    experiment_id: str
    cycle_index: int
    kind: str
    epoch: int
    train_score: float | None
    val_score: float | None
    test_score: float | None
    loss: float | None = None
    candidate_scores: list | None = None
    seconds: float = 0.0
    timestamp: float = field(default_factory=time.time)

    def __post_init__(self):
        if self.kind not in ("neuron", "dendrite"):
            raise ValueError(f"cycle kind must be 'neuron' or 'dendrite', got {self.kind!r}")
        if self.epoch < 1 or self.cycle_index < 0:
            raise ValueError("epoch must be >= 1 and cycle_index >= 0")


VOLATILE_FIELDS = ("timestamp", "seconds")


class MetricsLog:
    """Append-only JSON-lines file; a lock serializes writers in this process."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._last = {}
        if self.path.exists():
            for r in read_metrics(self.path, allow_empty=True):
                self._last[r.experiment_id] = (r.cycle_index, r.epoch)

    def append(self, record):
        key = (record.cycle_index, record.epoch)
        line = json.dumps(asdict(record), sort_keys=True) + "\n"
        with self._lock:
            last = self._last.get(record.experiment_id)
            if last is not None and key <= last:
                raise ValueError(f"metrics must advance: {key} after {last}")
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as f:
                f.write(line)
                f.flush()
            self._last[record.experiment_id] = key


def append_metrics(record, path):
    MetricsLog(path).append(record)


def read_metrics(path, allow_empty=False):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CheckpointError(f"cannot read metrics {path}: {exc}") from exc
    out = []
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(MetricsRecord(**json.loads(line)))
        except (ValueError, TypeError) as exc:
            raise CheckpointError(f"{path}: line {n} is not a metrics record ({exc})") from exc
    if not out and not allow_empty:
        raise CheckpointError(f"{path}: no metrics records")
    return out


def epoch_curves(records):
    """Per-epoch CSV (cycle, kind, epoch, global step, train, val, test); no wall-clock fields."""

    def fmt(v):
        return "" if v is None else repr(float(v))

    lines = ["cycle,kind,epoch,step,train,val,test"]
    for step, r in enumerate(records, start=1):
        lines.append(f"{r.cycle_index},{r.kind},{r.epoch},{step},"
                     f"{fmt(r.train_score)},{fmt(r.val_score)},{fmt(r.test_score)}")
    return "\n".join(lines) + "\n"
