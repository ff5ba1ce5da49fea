"""Deterministic simulator for assign-then-contrast federated learning on tiny numpy transformers."""

from .config import ExperimentConfig, parse_config, preset
from .experiment import Experiment, run_experiment
from .model import ModelConfig, init_model

__all__ = ["Experiment", "ExperimentConfig", "ModelConfig", "init_model", "parse_config", "preset", "run_experiment"]
__version__ = "0.1.0"
