"""Two-step causal survival pipeline.

Step 1 fits a causal tree on observed survival times.  Step 2 takes every
selected leaf, fits one survival forest per arm on the leaf's patients and
predicts both arms' curves for held-out patients; the difference of the two
curves (and of their restricted means) is the patient's differential survival.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .causal_tree import (
    CausalTree,
    CausalTreeConfig,
    LeafReport,
    _canonical,
    extract_leaf_reports,
    fit_causal_tree,
    leaf_assign,
    permutation_gain_threshold,
    select_leaves,
)
from .survival_core import (
    DifferenceCurve,
    SurvivalCurve,
    SurvivalRecord,
    curve_diff,
    km_estimate,
    median_survival,
    records_to_arrays,
    rmst,
)
from .survival_forest import ForestConfig, SurvivalForest, fit_forest_arrays

FEATURE_SCOPES = ("tree_features", "all_features")
MIN_ARM_RECORDS = 30


@dataclass(frozen=True)
class PipelineConfig:
    causal: CausalTreeConfig = field(default_factory=CausalTreeConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    ate_threshold: float = 0.0
    horizon: Optional[float] = None  # None -> max observed event time
    feature_scope: str = "tree_features"
    test_fraction: float = 0.2
    seed: int = 0
    # quantile of the permutation null for min_effect_gain; None keeps causal.min_effect_gain
    gain_quantile: Optional[float] = None
    gain_permutations: int = 49

    def __post_init__(self):
        if not self.ate_threshold >= 0:
            raise ValueError("ate_threshold must be nonnegative")
        if self.horizon is not None and not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.feature_scope not in FEATURE_SCOPES:
            raise ValueError(f"feature_scope must be one of {FEATURE_SCOPES}")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.gain_quantile is not None and not 0 < self.gain_quantile < 1:
            raise ValueError("gain_quantile must lie in (0, 1)")
        if self.gain_permutations < 1:
            raise ValueError("gain_permutations must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        d["causal"] = CausalTreeConfig(**d.get("causal", {}))
        d["forest"] = ForestConfig(**d.get("forest", {}))
        return cls(**d)


@dataclass
class PatientResult:
    patient_id: object
    arm: int
    curve_t0: SurvivalCurve
    curve_t1: SurvivalCurve
    diff: DifferenceCurve
    rmst_diff: float


@dataclass
class LeafResult:
    report: LeafReport
    forest_t0: SurvivalForest
    forest_t1: SurvivalForest
    feature_indices: List[int]
    patient_results: List[PatientResult]
    leaf_km_t0: SurvivalCurve
    leaf_km_t1: SurvivalCurve
    train_ids: Dict[int, list]

    @property
    def mean_rmst_diff(self) -> float:
        return float(np.mean([p.rmst_diff for p in self.patient_results]))


@dataclass
class SkippedLeaf:
    report: LeafReport
    reason: str


@dataclass
class PipelineResult:
    tree: CausalTree
    root_ate: float
    median_t0: Optional[float]
    median_t1: Optional[float]
    leaf_results: List[LeafResult]
    skipped: List[SkippedLeaf]
    reports: List[LeafReport]
    selected: List[int]
    horizon: float
    feature_names: List[str]
    provenance: dict

    def leaf_result(self, leaf_id: int) -> Optional[LeafResult]:
        for lr in self.leaf_results:
            if lr.report.leaf_id == leaf_id:
                return lr
        return None

    def summary(self) -> dict:
        baseline_diff = (
            None if self.median_t0 is None or self.median_t1 is None else self.median_t1 - self.median_t0
        )
        return {
            "root_ate": self.root_ate,
            "horizon": self.horizon,
            "baseline": {
                "median_t0": self.median_t0,
                "median_t1": self.median_t1,
                "median_diff": baseline_diff,
            },
            "selected_leaves": list(self.selected),
            "leaves": [
                {
                    **lr.report.to_dict(),
                    "n_patients_predicted": len(lr.patient_results),
                    "mean_rmst_diff": lr.mean_rmst_diff,
                    "rmst_leaf_km_t0": rmst(lr.leaf_km_t0, self.horizon),
                    "rmst_leaf_km_t1": rmst(lr.leaf_km_t1, self.horizon),
                    "features": [self.feature_names[j] for j in lr.feature_indices],
                }
                for lr in self.leaf_results
            ],
            "skipped": [{**s.report.to_dict(), "reason": s.reason} for s in self.skipped],
            "provenance": self.provenance,
        }


class NoFittedModelError(LookupError):
    """A patient routes to a leaf that was not selected or was skipped."""

    def __init__(self, report: LeafReport, why: str):
        super().__init__(f"no fitted model for leaf {report.leaf_id} ({why}): {report.path_string()}")
        self.report = report


def dataset_fingerprint(records: Sequence[SurvivalRecord]) -> str:
    h = hashlib.sha256()
    for r in _canonical(records):
        h.update(repr((r.id, r.time, r.event, r.treatment, r.covariates)).encode())
    return h.hexdigest()


def config_hash(config: PipelineConfig) -> str:
    text = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()


def _sub_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


def population_baseline(records: Sequence[SurvivalRecord]) -> dict:
    """Arm-wise Kaplan-Meier medians and their difference (arm 1 minus arm 0)."""
    arms = {a: [r for r in records if r.treatment == a] for a in (0, 1)}
    if not arms[0] or not arms[1]:
        raise ValueError("both treatments required")
    m0 = median_survival(km_estimate(arms[0]))
    m1 = median_survival(km_estimate(arms[1]))
    return {
        "median_t0": m0,
        "median_t1": m1,
        "median_diff": None if m0 is None or m1 is None else m1 - m0,
    }


def _fit_leaf(leaf_records, report, features, config: PipelineConfig, horizon, n_jobs):
    viable = max(2 * config.forest.min_leaf, MIN_ARM_RECORDS)
    by_arm = {a: [r for r in leaf_records if r.treatment == a] for a in (0, 1)}
    train, test = {}, {}
    for a in (0, 1):
        recs = by_arm[a]
        rng = np.random.default_rng([config.seed, report.leaf_id, a])
        perm = rng.permutation(len(recs))
        n_test = max(1, int(round(config.test_fraction * len(recs)))) if recs else 0
        test[a] = [recs[i] for i in sorted(perm[:n_test])]
        train[a] = [recs[i] for i in sorted(perm[n_test:])]
        if len(train[a]) < viable:
            return None, (f"arm {a} has {len(train[a])} training records after holding out "
                          f"{n_test}; needs {viable}")
        if not any(r.event for r in train[a]):
            return None, f"arm {a} has no events"

    forests = {}
    for a in (0, 1):
        time, event, _, X = records_to_arrays(train[a])
        forests[a] = fit_forest_arrays(
            time, event, X[:, features], config.forest, _sub_seed(config.seed, report.leaf_id, a), n_jobs=n_jobs
        )

    held_out = sorted(test[0] + test[1], key=lambda r: (type(r.id).__name__, r.id))
    _, _, _, Xh = records_to_arrays(held_out)
    Xh = Xh[:, features]
    s0 = forests[0].predict_matrix(Xh)
    s1 = forests[1].predict_matrix(Xh)
    patients = []
    for k, r in enumerate(held_out):
        c0 = SurvivalCurve(forests[0].time_grid, s0[k])
        c1 = SurvivalCurve(forests[1].time_grid, s1[k])
        patients.append(
            PatientResult(r.id, r.treatment, c0, c1, curve_diff(c1, c0), rmst(c1, horizon) - rmst(c0, horizon))
        )
    result = LeafResult(
        report=report,
        forest_t0=forests[0],
        forest_t1=forests[1],
        feature_indices=list(features),
        patient_results=patients,
        leaf_km_t0=km_estimate(by_arm[0]),
        leaf_km_t1=km_estimate(by_arm[1]),
        train_ids={a: [r.id for r in train[a]] for a in (0, 1)},
    )
    return result, None


def run_two_step(
    records: Sequence[SurvivalRecord],
    config: PipelineConfig,
    feature_names: Optional[Sequence[str]] = None,
    n_jobs: int = 1,
) -> PipelineResult:
    """Causal tree, leaf selection, then twin survival forests per selected leaf."""
    records = _canonical(records)
    time, event, _, X = records_to_arrays(records)
    if X.shape[1] < 1:
        raise ValueError("at least one covariate is required")
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(X.shape[1])]

    causal = config.causal
    if config.gain_quantile is not None:
        level = permutation_gain_threshold(
            records, causal, config.seed, config.gain_permutations, config.gain_quantile
        )
        causal = replace(causal, min_effect_gain=max(level, causal.min_effect_gain))
    tree = fit_causal_tree(records, causal, config.seed)
    selected = select_leaves(tree, config.ate_threshold)
    reports = extract_leaf_reports(tree, names)
    if config.horizon is not None:
        horizon = float(config.horizon)
    elif event.any():
        horizon = float(time[event == 1].max())
    else:
        raise ValueError("no events observed; pass an explicit horizon")
    features = tree.split_features() if config.feature_scope == "tree_features" else list(range(X.shape[1]))

    assignment = [leaf_assign(tree, x) for x in X]
    leaf_results, skipped = [], []
    for report in reports:
        if report.leaf_id not in selected:
            continue
        members = [r for r, leaf in zip(records, assignment) if leaf == report.leaf_id]
        result, reason = _fit_leaf(members, report, features, config, horizon, n_jobs)
        if result is None:
            skipped.append(SkippedLeaf(report, reason))
        else:
            leaf_results.append(result)

    baseline = population_baseline(records)
    return PipelineResult(
        tree=tree,
        root_ate=tree.root_tau,
        median_t0=baseline["median_t0"],
        median_t1=baseline["median_t1"],
        leaf_results=leaf_results,
        skipped=skipped,
        reports=reports,
        selected=selected,
        horizon=horizon,
        feature_names=names,
        provenance={
            "seed": config.seed,
            "config": config.to_dict(),
            "config_hash": config_hash(config),
            "min_effect_gain": causal.min_effect_gain,
            "dataset_fingerprint": dataset_fingerprint(records),
            "n_records": len(records),
        },
    )


@dataclass
class PatientPrediction:
    leaf_id: int
    curve_t0: SurvivalCurve
    curve_t1: SurvivalCurve
    diff: DifferenceCurve
    rmst_diff: float


def predict_new_patient(result: PipelineResult, covariates) -> PatientPrediction:
    """Route a patient through the causal tree and query that leaf's twin forests."""
    leaf_id = leaf_assign(result.tree, covariates)
    lr = result.leaf_result(leaf_id)
    if lr is None:
        report = next(r for r in result.reports if r.leaf_id == leaf_id)
        why = "skipped" if any(s.report.leaf_id == leaf_id for s in result.skipped) else "not selected"
        raise NoFittedModelError(report, why)
    x = np.asarray(covariates, dtype=float).reshape(1, -1)[:, lr.feature_indices]
    c0 = SurvivalCurve(lr.forest_t0.time_grid, lr.forest_t0.predict_matrix(x)[0])
    c1 = SurvivalCurve(lr.forest_t1.time_grid, lr.forest_t1.predict_matrix(x)[0])
    h = result.horizon
    return PatientPrediction(leaf_id, c0, c1, curve_diff(c1, c0), rmst(c1, h) - rmst(c0, h))
