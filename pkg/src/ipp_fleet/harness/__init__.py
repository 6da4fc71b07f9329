"""Experiment orchestration: configuration, evaluation sweeps, GP benchmark, rendering."""

from .config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config
from .experiments import gp_bench, render, render_episode, run_episode, run_eval
