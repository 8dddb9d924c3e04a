"""Prior-guided pseudo-label refinement for semi-supervised domain adaptation."""

from .datagen import (
    ClassGroups,
    FeatureDataset,
    LabelSpaceConfig,
    SyntheticConfig,
    class_groups,
    generate_domain_pair,
    make_benchmark,
)
from .estimator import UniSSDAClassifier
from .exceptions import ConfigError, DataError, NumericalAbort, UniSSDAError
from .metrics import MetricsReport, aggregate_runs, evaluate
from .pgpr import aggregate, group_reweight, refine
from .train import TrainConfig, TrainingData, run

__version__ = "0.1.0"

__all__ = [
    "ClassGroups",
    "ConfigError",
    "DataError",
    "FeatureDataset",
    "LabelSpaceConfig",
    "MetricsReport",
    "NumericalAbort",
    "SyntheticConfig",
    "TrainConfig",
    "TrainingData",
    "UniSSDAClassifier",
    "UniSSDAError",
    "aggregate",
    "aggregate_runs",
    "class_groups",
    "evaluate",
    "generate_domain_pair",
    "group_reweight",
    "make_benchmark",
    "refine",
    "run",
]
