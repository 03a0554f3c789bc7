"""Experiment orchestration: configuration, checkpoints, pipeline, ablations, reports, CLI."""
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_from_dict, derive_seed, load_config
from .pipeline import (
    RunRecord,
    SeedContext,
    apply_variant,
    run_ablations,
    run_pipeline,
    run_variant,
    standard_variants,
    teacher_combinations,
)
from .report import emit_report, load_records, mean_std, save_records

__all__ = [
    "RunConfig",
    "RunRecord",
    "SeedContext",
    "apply_variant",
    "config_from_dict",
    "derive_seed",
    "emit_report",
    "load_checkpoint",
    "load_config",
    "load_records",
    "mean_std",
    "run_ablations",
    "run_pipeline",
    "run_variant",
    "save_checkpoint",
    "save_records",
    "standard_variants",
    "teacher_combinations",
]
