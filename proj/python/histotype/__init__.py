"""Molecular subtyping of H&E whole-slide images."""

from ._core import (
    Error,
    Config,
    average_precision,
    class_metrics,
    confusion_matrix,
    derive_seed,
    estimate_stain_profile,
    f1_score,
    generate_synthetic_cohort,
    gbdt_predict_proba,
    gbdt_train,
    macro_metrics,
    normalize_tile,
    optimal_threshold,
    plan_tiles,
    pr_curve,
    run_all,
    run_stage,
    stage_names,
)

__all__ = [
    "Error",
    "Config",
    "average_precision",
    "class_metrics",
    "confusion_matrix",
    "derive_seed",
    "estimate_stain_profile",
    "f1_score",
    "generate_synthetic_cohort",
    "gbdt_predict_proba",
    "gbdt_train",
    "macro_metrics",
    "normalize_tile",
    "optimal_threshold",
    "plan_tiles",
    "pr_curve",
    "run_all",
    "run_stage",
    "stage_names",
]
