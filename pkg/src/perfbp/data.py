"""Datasets: IDX and CSV loaders, synthetic generators, splitting and batching."""

import csv
import gzip
import hashlib
import io
import os
import re
import struct
import urllib.parse
import urllib.request
import zipfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DataError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Inputs with a leading sample axis and integer class ids (or real targets)."""

    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = ""
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise DataError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.labels.dtype.kind in "iu" and len(self.labels):
            if self.labels.min() < 0 or self.labels.max() >= self.class_count:
                raise DataError("class ids must lie in [0, class_count)")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, name=None):
        return Dataset(self.inputs[idx], self.labels[idx], self.class_count,
                       name or self.name, list(self.class_names))


# -- IDX --------------------------------------------------------------

def _read_bytes(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, magic, ndim, what):
    if len(raw) < 4 + 4 * ndim:
        raise DataError(f"{what}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataError(f"{what}: bad magic 0x{found:08x} (expected 0x{magic:08x})")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    need = int(np.prod(dims))
    if len(body) < need:
        raise DataError(f"{what}: truncated file ({len(body)} of {need} data bytes)")
    return np.frombuffer(body[:need], dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, transpose=False, name="idx"):
    """Load an IDX image/label pair (optionally gzipped).

    Pixels are scaled to [0, 1] and returned as (n, 1, rows, cols).
    ``transpose`` swaps rows and columns, which EMNIST's raw files need.
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, str(images_path))
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, str(labels_path))
    if len(images) != len(labels):
        raise DataError(f"count mismatch: {len(images)} images, {len(labels)} labels")
    if transpose:
        images = images.transpose(0, 2, 1)
    x = images[:, None, :, :].astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    return Dataset(x, y, int(y.max()) + 1 if len(y) else 0, name)


def write_idx(path, array):
    """Write a uint8 array as IDX (3-D -> image magic, 1-D -> label magic); gzip if path ends in .gz."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}[arr.ndim]
    raw = struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()
    if str(path).endswith(".gz"):
        raw = gzip.compress(raw, mtime=0)
    Path(path).write_bytes(raw)


# -- CSV --------------------------------------------------------------

def load_csv(path, label_column, feature_columns=None, name=None):
    """Load a headed CSV; labels become dense ids in order of first appearance.

    Row numbers in errors count data records from 1 (the header is not a row).
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header expected") from None
        if label_column not in header:
            raise DataError(f"{path}: missing column {label_column!r}")
        if feature_columns is None:
            feature_columns = [c for c in header if c != label_column]
        for c in feature_columns:
            if c not in header:
                raise DataError(f"{path}: missing column {c!r}")
        li = header.index(label_column)
        fi = [header.index(c) for c in feature_columns]
        ids = {}
        xs, ys = [], []
        for r, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}: row {r} has {len(rec)} cells, header has {len(header)}")
            row = []
            for j in fi:
                try:
                    row.append(float(rec[j]))
                except ValueError:
                    raise DataError(
                        f"{path}: row {r}, column {header[j]!r}: cannot parse {rec[j]!r} as a number"
                    ) from None
            xs.append(row)
            ys.append(ids.setdefault(rec[li], len(ids)))
    x = np.asarray(xs, dtype=np.float64).reshape(len(xs), len(fi))
    return Dataset(x, np.asarray(ys, dtype=np.int64), len(ids), name or Path(path).stem, list(ids))


def save_csv(ds, path, label_column="label", feature_names=None):
    """Write flat features plus a label column; floats use repr so they round-trip exactly."""
    x = ds.inputs.reshape(len(ds), -1)
    names = feature_names or [f"x{j}" for j in range(x.shape[1])]
    labels = [ds.class_names[k] for k in ds.labels] if ds.class_names else list(ds.labels)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(list(names) + [label_column])
        for row, lab in zip(x, labels):
            w.writerow([repr(float(v)) for v in row] + [lab])


# -- synthetic --------------------------------------------------------

def gen_two_spirals(n_per_class, noise=0.0, seed=0, turns=1.5, offset=0.0):
    """Two interleaved spirals; class 1 is class 0 rotated by pi.

    Point i sits at parameter s = (i + offset) / n_per_class: angle
    2*pi*turns*s, radius 0.1 + 0.9*s.  ``offset`` in (0, 1) produces points
    between the default ones (a held-out rotation along the arms).
    """
    if n_per_class < 1 or noise < 0:
        raise ValueError("need n_per_class >= 1 and noise >= 0")
    s = (np.arange(n_per_class) + offset) / n_per_class
    angle = 2 * np.pi * turns * s
    r = 0.1 + 0.9 * s
    arm = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
    x = np.concatenate([arm, -arm])
    if noise:
        x = x + noise * np.random.default_rng(seed).normal(size=x.shape)
    y = np.repeat([0, 1], n_per_class)
    return Dataset(x, y, 2, "two_spirals")


def gen_xor_quadrants(n, seed=0, margin=0.0):
    """Uniform points in [-1, 1]^2 labelled 1 where x*y > 0; optional gap around the axes."""
    rng = np.random.default_rng(seed)
    pts = []
    while sum(len(p) for p in pts) < n:
        p = rng.uniform(-1, 1, size=(n, 2))
        pts.append(p[(np.abs(p) > margin).all(axis=1)])
    x = np.concatenate(pts)[:n]
    y = (x[:, 0] * x[:, 1] > 0).astype(np.int64)
    return Dataset(x, y, 2, "xor_quadrants")


# -- splitting and batching -------------------------------------------

@dataclass
class SplitSpec:
    """Train/val/test fractions.  ``test=0`` means the test set comes from elsewhere."""

    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    seed: int = 0
    stratified: bool = False

    def __post_init__(self):
        for v in (self.train, self.val):
            if not 0.0 < v < 1.0:
                raise ValueError("train and val fractions must lie in (0, 1)")
        if not 0.0 <= self.test < 1.0:
            raise ValueError("test fraction must lie in [0, 1)")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


def _partition_sizes(n, spec):
    n_val = int(round(n * spec.val))
    n_test = int(round(n * spec.test))
    return n - n_val - n_test, n_val, n_test


def split_indices(n, spec, labels=None):
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5911]))
    parts = ([], [], [])
    if spec.stratified and labels is not None:
        for c in np.unique(labels):
            idx = np.flatnonzero(labels == c)
            idx = idx[rng.permutation(len(idx))]
            a, b, _ = _partition_sizes(len(idx), spec)
            for part, chunk in zip(parts, (idx[:a], idx[a:a + b], idx[a + b:])):
                part.append(chunk)
        out = [np.concatenate(p) for p in parts]
        out = [p[rng.permutation(len(p))] for p in out]
    else:
        perm = rng.permutation(n)
        a, b, _ = _partition_sizes(n, spec)
        out = [perm[:a], perm[a:a + b], perm[a + b:]]
    return out


def split(ds, spec):
    """Seeded permutation, then contiguous train/val/test blocks (per class when stratified).

    Returns ``(train, val, test)``; ``test`` is None when ``spec.test == 0``.
    """
    tr, va, te = split_indices(len(ds), spec, ds.labels if ds.labels.ndim == 1 else None)
    for nm, idx in (("train", tr), ("val", va)) + ((("test", te),) if spec.test > 0 else ()):
        if len(idx) == 0:
            raise DataError(f"split {nm!r} received 0 samples")
    test = ds.subset(te, f"{ds.name}:test") if spec.test > 0 else None
    return ds.subset(tr, f"{ds.name}:train"), ds.subset(va, f"{ds.name}:val"), test


def batches(n, batch_size, shuffle_seed=None, epoch=0):
    """Index arrays covering ``range(n)`` once; the last batch may be short.

    ``n`` may also be a Dataset.  With a seed the order is a permutation that
    depends on (seed, epoch); without one it is dataset order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(n) if not isinstance(n, (int, np.integer)) else int(n)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng(np.random.SeedSequence([shuffle_seed, epoch])).permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


# -- bundled MNIST subset ---------------------------------------------

MNIST5K_FILES = ("mnist5k-images-idx3-ubyte.gz", "mnist5k-labels-idx1-ubyte.gz")


def mnist5k_dir():
    env = os.environ.get("PERFBP_MNIST5K")
    if env:
        return Path(env)
    return Path(str(resources.files("perfbp") / "datasets" / "mnist5k"))


def load_mnist5k(directory=None):
    """5000 MNIST digits (500 per class) shipped with the package as IDX files."""
    d = Path(directory) if directory else mnist5k_dir()
    return load_idx(d / MNIST5K_FILES[0], d / MNIST5K_FILES[1], name="mnist5k")


def fetch_mnist5k(dest, index_url="https://pypi.org/simple/mlxtend/",
                  wheel_name="mlxtend-0.24.0-py3-none-any.whl", wheel_path=None):
    """Rebuild the bundled subset from the 5k-digit CSV inside the mlxtend wheel.

    The wheel is located through the package index (its sha256 is checked)
    unless a local ``wheel_path`` is given.
    """
    if wheel_path is None:
        with urllib.request.urlopen(index_url) as resp:
            page = resp.read().decode()
        m = re.search(r'href="([^"#]*%s)#sha256=([0-9a-f]+)"' % re.escape(wheel_name), page)
        if m is None:
            raise DataError(f"{wheel_name} not listed at {index_url}")
        with urllib.request.urlopen(urllib.parse.urljoin(index_url, m.group(1))) as resp:
            blob = resp.read()
        if hashlib.sha256(blob).hexdigest() != m.group(2):
            raise DataError(f"sha256 mismatch for {wheel_name}")
    else:
        blob = Path(wheel_path).read_bytes()
    wheel = zipfile.ZipFile(io.BytesIO(blob))
    raw = gzip.decompress(wheel.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.StringIO(raw.decode()), delimiter=",", dtype=np.int64)
    images = table[:, :-1].reshape(-1, 28, 28)
    labels = table[:, -1]
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    write_idx(dest / MNIST5K_FILES[0], images)
    write_idx(dest / MNIST5K_FILES[1], labels)
    return dest
