"""Experiment plumbing: config, synthetic task, checkpoints, runs."""

from .checkpoint import Checkpoint, CheckpointError, DigestMismatch, ShapeMismatch, VersionMismatch, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, default_config, load_config, parse_config
from .experiment import build_model, evaluate, run_experiment
from .task import TaskSpec, generate_task

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "DigestMismatch",
    "ExperimentConfig",
    "ShapeMismatch",
    "TaskSpec",
    "VersionMismatch",
    "build_model",
    "default_config",
    "evaluate",
    "generate_task",
    "load_checkpoint",
    "load_config",
    "parse_config",
    "run_experiment",
    "save_checkpoint",
]
