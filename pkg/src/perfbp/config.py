"""Experiment configuration: nested dataclasses loaded from YAML.

Precedence is ``--set`` overrides > file > defaults.  Unknown keys anywhere
are an error naming the dotted key.  See ``configs/example.yaml`` in the
repository for an annotated file listing every field.
"""

import dataclasses
from dataclasses import dataclass, field

import yaml

from .dendrites import CandidateSettings
from .errors import ConfigError
from .losses import LOSSES
from .network import Conv2d, Dense, Dropout, Flatten, MaxPool2d, layer_from_dict
from .optim import OptimizerSettings

ABLATION_MODES = ("full_pb", "only_head", "only_backbone", "cc_no_perforation",
                  "gd_dendrites", "baseline_no_dendrites")
DATA_KINDS = ("mnist5k", "idx", "emnist", "csv", "two_spirals", "xor")
PRESETS = ("emnist", "emnist_half", "mlp", "perceptron")


@dataclass
class SplitConfig:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    seed: int | None = None  # None: use the experiment seed
    stratified: bool = True


@dataclass
class DataConfig:
    kind: str = "two_spirals"
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    transpose: bool | None = None
    csv_path: str | None = None
    label_column: str = "label"
    feature_columns: list | None = None
    n_per_class: int = 100
    n: int = 400
    noise: float = 0.0
    margin: float = 0.0
    data_seed: int = 0
    max_samples: int | None = None
    split: SplitConfig = field(default_factory=SplitConfig)

    def __post_init__(self):
        if self.kind not in DATA_KINDS:
            raise ValueError(f"data.kind must be one of {DATA_KINDS}, got {self.kind!r}")


@dataclass
class ModelConfig:
    preset: str = "mlp"
    hidden: list = field(default_factory=lambda: [16])
    hidden_activation: str = "relu"
    output_activation: str = "identity"
    outputs: int | None = None  # None: class count (1 for the perceptron preset)
    layers: list | None = None  # explicit layer dicts; overrides the preset

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"model.preset must be one of {PRESETS}, got {self.preset!r}")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    ablation_mode: str = "full_pb"
    patience: int = 25
    fixed_epochs: int | None = None
    max_epochs: int = 500
    max_dendrite_rounds: int = 10
    batch_size: int = 64
    eval_batch_size: int = 1000
    loss: str = "cross_entropy_softmax"
    score_metric: str = "accuracy"
    evaluate_test_each_epoch: bool = True
    runs_dir: str | None = None
    dtype: str = "float64"
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    candidates: CandidateSettings = field(default_factory=CandidateSettings)

    def __post_init__(self):
        if self.ablation_mode not in ABLATION_MODES:
            raise ValueError(f"ablation_mode must be one of {ABLATION_MODES}, got {self.ablation_mode!r}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.fixed_epochs is not None and self.fixed_epochs < 1:
            raise ValueError("fixed_epochs must be >= 1")
        if self.max_epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("max_epochs, batch_size and eval_batch_size must be >= 1")
        if self.max_dendrite_rounds < 0:
            raise ValueError("max_dendrite_rounds must be >= 0")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be 'float64' or 'float32'")
        if self.score_metric not in ("accuracy", "auc"):
            raise ValueError("score_metric must be 'accuracy' or 'auc'")


# -- building from dicts ----------------------------------------------

def _build(cls, data, prefix=""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config section '{prefix.rstrip('.') or '<root>'}' must be a mapping")
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, val in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
        f = fields[key]
        sub = _nested_type(f)
        kwargs[key] = _build(sub, val, f"{prefix}{key}.") if sub is not None else val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config{' section ' + prefix.rstrip('.') if prefix else ''}: {exc}") from exc


def _nested_type(f):
    if f.default_factory is not dataclasses.MISSING:
        sample = f.default_factory()
        if dataclasses.is_dataclass(sample):
            return type(sample)
    return None


def to_dict(cfg):
    return dataclasses.asdict(cfg)


def from_dict(data):
    return _build(ExperimentConfig, data)


def parse_override(text):
    """``a.b=value`` -> (["a", "b"], value) with the value parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from exc
    return key.split("."), value


def apply_overrides(data, overrides):
    data = dict(data or {})
    for text in overrides or ():
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            child = node.get(part)
            child = dict(child) if isinstance(child, dict) else {}
            node[part] = child
            node = child
        node[path[-1]] = value
    return data


def load_config(path=None, overrides=None):
    """Read YAML (or start from defaults when ``path`` is None) and apply overrides."""
    data = {}
    if path is not None:
        try:
            with open(path) as f:
                data = yaml.safe_load(f) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return from_dict(apply_overrides(data, overrides))


def dump_config(cfg):
    return yaml.safe_dump(to_dict(cfg), sort_keys=True)


# -- architectures ----------------------------------------------------

def preset_layers(model, class_count):
    """Layer list for ``model`` given the dataset's class count."""
    if model.layers is not None:
        try:
            return [layer_from_dict(d) for d in model.layers]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad model.layers entry: {exc}") from exc
    out = model.outputs or (1 if model.preset == "perceptron" else class_count)
    if model.preset in ("emnist", "emnist_half"):
        w = 1 if model.preset == "emnist" else 2
        return [
            Conv2d(32 // w, (3, 3), activation="relu"),
            Conv2d(64 // w, (3, 3), activation="relu"),
            MaxPool2d(2),
            Dropout(0.25),
            Flatten(),
            Dense(128 // w, activation="relu"),
            Dropout(0.5),
            Dense(out, activation=model.output_activation),
        ]
    if model.preset == "perceptron":
        return [Flatten(), Dense(out, activation=model.output_activation)]
    layers = [Flatten()]
    layers += [Dense(h, activation=model.hidden_activation) for h in model.hidden]
    layers.append(Dense(out, activation=model.output_activation))
    return layers
