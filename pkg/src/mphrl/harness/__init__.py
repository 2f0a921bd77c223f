"""Experiment harness: configs, presets, runs, ablation matrices, plots, CLI."""
from .config import PRESETS, ExperimentConfig, apply_overrides, load_config, parse_config, preset_config, resolve_config
from .plots import emit_plots
from .runner import (METRICS_COLUMNS, RunRecord, ablation_matrix, build_taskset, format_summary, parse_summary,
                     run_baseline_ppo, run_experiment, run_relearn, run_single)

__all__ = [
    "METRICS_COLUMNS", "PRESETS", "ExperimentConfig", "RunRecord", "ablation_matrix", "apply_overrides",
    "build_taskset", "emit_plots", "format_summary", "load_config", "parse_config", "parse_summary",
    "preset_config", "resolve_config", "run_baseline_ppo", "run_experiment", "run_relearn", "run_single",
]
