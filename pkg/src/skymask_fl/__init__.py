"""Federated-learning simulator with learnable-mask poisoning detection."""

from .data import LabeledDataset, PartitionSpec, TriggerSpec
from .engine import ClientUpdate, DetectionReport, Federation, FLParams, RoundState, run_round
from .exceptions import ConfigurationError, NumericError, SkyMaskError, UsageError
from .harness import ExperimentConfig, load_config, run_experiment, write_outputs
from .masks import SkyMaskDetector
from .nn import LayerLayout
from .stats import DiagonalGMM, GramPCA

__version__ = "0.1.0"

__all__ = [
    "ClientUpdate",
    "ConfigurationError",
    "DetectionReport",
    "DiagonalGMM",
    "ExperimentConfig",
    "FLParams",
    "Federation",
    "GramPCA",
    "LabeledDataset",
    "LayerLayout",
    "NumericError",
    "PartitionSpec",
    "RoundState",
    "SkyMaskDetector",
    "SkyMaskError",
    "TriggerSpec",
    "UsageError",
    "load_config",
    "run_experiment",
    "run_round",
    "write_outputs",
]
