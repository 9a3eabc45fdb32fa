"""Config-driven experiment runner, report generator and command line interface."""

from .config import PRESETS, ExperimentConfig, load_config, parse_config
from .report import emit_report
from .runner import run_attack, run_eval, run_suite, run_train

__all__ = ["PRESETS", "ExperimentConfig", "load_config", "parse_config", "emit_report",
           "run_attack", "run_eval", "run_suite", "run_train"]
