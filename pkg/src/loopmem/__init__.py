"""Appearance-based loop-closure detection with bounded per-frame processing time."""

from loopmem.config import ConfigError, EngineConfig, load_config, parse_config
from loopmem.engine import Engine
from loopmem.ltm import LtmStore, PersistenceError
from loopmem.vocabulary import Vocabulary

__all__ = [
    "ConfigError",
    "Engine",
    "EngineConfig",
    "LtmStore",
    "PersistenceError",
    "Vocabulary",
    "load_config",
    "parse_config",
]
