"""Experiment configuration, Monte-Carlo driver, reports and CLI."""

from delaysched.harness.config import ConfigError, ExperimentConfig, load_config
from delaysched.harness.experiment import SummaryStats, run_experiment, run_experiments
from delaysched.harness.reports import overflow_report, report_directory, scaling_report
