"""Experiment configuration, pipelines and the ``decohist`` CLI."""

from .config import SCHEMA, ConfigError, ExperimentConfig, load_config, parse_config
from .runner import Invariant, RunReport, emit_report, run_experiment

__all__ = [
    "SCHEMA",
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "Invariant",
    "RunReport",
    "emit_report",
    "run_experiment",
]
