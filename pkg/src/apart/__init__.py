"""Exemplar-free class-incremental learning on long-tailed streams with
adapter pools over a frozen vision transformer."""
from .backbone import AdapterGroup, BackboneConfig, FrozenBackbone
from .checkpoint import load_model, save_model
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .estimator import APARTClassifier
from .experiment import ExperimentResult, run_experiment
from .metrics import (MetricsRecord, accuracy, average_and_last, exemplar_equivalent,
                      subgroup_accuracy, task_accuracy)
from .routing import AdapterPool, Assigner, ClassifierBank, combined_loss, pool_loss, select_group
from .stream import TaskStream, build_counts, make_stream, parse_cifar100, synth_dataset
from .trainer import MODES, TrainConfig

__all__ = [
    "APARTClassifier", "AdapterGroup", "AdapterPool", "Assigner", "BackboneConfig",
    "ClassifierBank", "ConfigError", "ExperimentConfig", "ExperimentResult", "FrozenBackbone",
    "MODES", "MetricsRecord", "TaskStream", "TrainConfig", "accuracy", "average_and_last",
    "build_counts", "combined_loss", "exemplar_equivalent", "load_config", "load_model",
    "make_stream", "parse_cifar100", "parse_config", "pool_loss", "run_experiment",
    "save_model", "select_group", "subgroup_accuracy", "synth_dataset", "task_accuracy",
]
__version__ = "0.1.0"
