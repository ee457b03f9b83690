"""Benchmark harness: synthetic workloads, scenario runs, reports, CLI."""

from .config import PRESETS, ScenarioConfig, load_config
from .report import emit_report
from .scenario import ComparisonReport, ScenarioReport, compare_modes, run_scenario

__all__ = [
    "ComparisonReport",
    "PRESETS",
    "ScenarioConfig",
    "ScenarioReport",
    "compare_modes",
    "emit_report",
    "load_config",
    "run_scenario",
]
