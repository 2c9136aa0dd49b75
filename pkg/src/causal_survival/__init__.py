"""Causal survival analysis: causal-tree subgroups with per-arm survival forests."""

from .survival_core import (
    DifferenceCurve,
    LogRankResult,
    SurvivalCurve,
    SurvivalRecord,
    concordance_index,
    curve_diff,
    km_estimate,
    logrank,
    median_survival,
    rmst,
    rmst_diff,
)
from .survival_forest import (
    ForestConfig,
    SurvivalForest,
    fit_survival_forest,
    fit_survival_tree,
    oob_error,
    predict_survival,
)
from .causal_tree import (
    CausalTree,
    CausalTreeConfig,
    LeafReport,
    extract_leaf_reports,
    fit_causal_tree,
    leaf_assign,
    select_leaves,
)
from .pipeline import (
    PipelineConfig,
    PipelineResult,
    population_baseline,
    predict_new_patient,
    run_two_step,
)
from .datagen import ScenarioSpec, generate, true_differential_rmst

__version__ = "0.1.0"

__all__ = [
    "CausalTree",
    "CausalTreeConfig",
    "DifferenceCurve",
    "ForestConfig",
    "LeafReport",
    "LogRankResult",
    "PipelineConfig",
    "PipelineResult",
    "ScenarioSpec",
    "SurvivalCurve",
    "SurvivalForest",
    "SurvivalRecord",
    "concordance_index",
    "curve_diff",
    "extract_leaf_reports",
    "fit_causal_tree",
    "fit_survival_forest",
    "fit_survival_tree",
    "generate",
    "km_estimate",
    "leaf_assign",
    "logrank",
    "median_survival",
    "oob_error",
    "population_baseline",
    "predict_new_patient",
    "predict_survival",
    "rmst",
    "rmst_diff",
    "run_two_step",
    "select_leaves",
    "true_differential_rmst",
]
