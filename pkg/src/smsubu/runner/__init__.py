"""Configuration, data ingestion, optimization and experiment orchestration."""
from .config import ExperimentConfig, dump_config, load_config
from .data import Dataset, load_csv, load_idx, synthetic_logreg
from .optim import adam_optimize, swa
from .pipeline import (
    emit_plot_data,
    ensemble_sms_ubu,
    find_stability_edge,
    read_plot_data,
    run_bias_study,
    write_manifest,
)

__all__ = [
    "ExperimentConfig",
    "dump_config",
    "load_config",
    "Dataset",
    "load_csv",
    "load_idx",
    "synthetic_logreg",
    "adam_optimize",
    "swa",
    "emit_plot_data",
    "ensemble_sms_ubu",
    "find_stability_edge",
    "read_plot_data",
    "run_bias_study",
    "write_manifest",
]
