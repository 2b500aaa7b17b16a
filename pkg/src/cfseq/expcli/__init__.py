"""Experiment CLI: config files, checkpoints, artifacts and plots."""
from .cli import main
from .config_io import ConfigError, config_fingerprint, dumps_config, loads_config, parse_config

__all__ = ["main", "ConfigError", "config_fingerprint", "dumps_config", "loads_config", "parse_config"]
