"""uprm: a small, self-contained anomaly-understanding stack.

Four modality experts (pose, object relations, background, coarse video)
feed a gated router whose trade-off regularizer keeps expert utilization
from collapsing. Everything runs on a hand-rolled tape autodiff over
numpy, with a synthetic security-video generator, a training loop, and
retrieval/captioning metrics backed by independent reference evaluators.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    TrainingError,
    UprmError,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "TrainingError",
    "UprmError",
    "__version__",
]
