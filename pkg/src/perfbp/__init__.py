"""Perforated backpropagation with correlation-trained dendrites, in numpy."""

from .dendrites import (CandidateSettings, correlation_score, dendrite_delta, promote_best,
                        spawn_candidates, train_candidates, update_running_averages)
from .errors import (CheckpointError, ConfigError, DataError, NonFiniteError, PerfBPError,
                     ShapeError)
from .grad import backprop, backprop_perforated, backprop_standard, finite_diff_check
from .network import (Conv2d, Dense, DendriteRound, Dropout, Flatten, MaxPool2d, Network,
                      forward, param_breakdown, param_count)

__version__ = "0.1.0"

__all__ = [
    "CandidateSettings", "CheckpointError", "ConfigError", "Conv2d", "DataError", "Dense",
    "DendriteRound", "Dropout", "Flatten", "MaxPool2d", "Network", "NonFiniteError",
    "PerfBPError", "ShapeError", "backprop", "backprop_perforated", "backprop_standard",
    "correlation_score", "dendrite_delta", "finite_diff_check", "forward", "param_breakdown",
    "param_count", "promote_best", "spawn_candidates", "train_candidates",
    "update_running_averages",
]
