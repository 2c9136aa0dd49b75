import json
import math
import random

import numpy as np
import pytest

from causal_survival.causal_tree import (
    CausalLeaf,
    CausalSplit,
    CausalTree,
    CausalTreeConfig,
    extract_leaf_reports,
    fit_causal_tree,
    leaf_assign,
    permutation_gain_threshold,
    select_leaves,
)
from causal_survival.datagen import generate_planted_effect
from causal_survival.survival_core import SurvivalRecord


def _leaf(i, tau, nt=20, nc=20):
    return CausalLeaf(i, tau, nt, nc, 50.0 + tau, 50.0)


def _manual_tree(root, root_tau=0.0, p=2):
    return CausalTree(root=root, config=CausalTreeConfig(), n_features=p, root_tau=root_tau)


def _constant_effect(seed, n=400, tau=5.0, p=5):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    T = rng.integers(0, 2, n)
    y = 50 + tau * T + rng.standard_normal(n)
    return [SurvivalRecord(i, float(y[i]), 1, int(T[i]), tuple(X[i])) for i in range(n)]


@pytest.fixture(scope="module")
def planted():
    cohort = generate_planted_effect(seed=3)
    return cohort, fit_causal_tree(cohort.records, CausalTreeConfig(), seed=3)


def test_config_validation():
    with pytest.raises(ValueError):
        CausalTreeConfig(min_treated_leaf=1)
    with pytest.raises(ValueError):
        CausalTreeConfig(max_depth=0)
    with pytest.raises(ValueError):
        CausalTreeConfig(split_candidates="all")


def test_planted_moderator_recovered(planted):
    cohort, tree = planted
    assert isinstance(tree.root, CausalSplit)
    assert tree.root.feature_index == 0
    for report in extract_leaf_reports(tree, cohort.feature_names):
        side = report.path[0]
        target = 10.0 if side.relation == ">=" else -10.0
        assert abs(report.tau_hat - target) <= 1.5


def test_constant_effect_with_calibrated_gain_is_single_leaf():
    single, close = 0, 0
    for seed in range(20):
        recs = _constant_effect(100 + seed)
        cfg = CausalTreeConfig()
        level = permutation_gain_threshold(recs, cfg, seed)
        tree = fit_causal_tree(recs, CausalTreeConfig(min_effect_gain=level), seed)
        if isinstance(tree.root, CausalLeaf):
            single += 1
            close += abs(tree.root.tau_hat - 5.0) <= 0.5
    assert single >= 18
    assert close == single


def test_fit_is_deterministic(planted):
    cohort, tree = planted
    again = fit_causal_tree(cohort.records, CausalTreeConfig(), seed=3)
    assert again.to_json() == tree.to_json()


def test_record_order_does_not_matter(planted):
    cohort, tree = planted
    shuffled = list(cohort.records)
    random.Random(0).shuffle(shuffled)
    assert fit_causal_tree(shuffled, CausalTreeConfig(), seed=3).to_json() == tree.to_json()


def test_both_arms_required():
    recs = [SurvivalRecord(i, 10.0 + i, 1, 1, (float(i),)) for i in range(50)]
    with pytest.raises(ValueError, match="both treatments required"):
        fit_causal_tree(recs, CausalTreeConfig(), 0)


def test_leaf_effect_is_exact_mean_difference(planted):
    cohort, tree = planted
    est_ids = set(tree.estimation_ids)
    est = [r for r in cohort.records if r.id in est_ids]
    for report in extract_leaf_reports(tree, cohort.feature_names):
        members = [r for r in est if report.selects(r.covariates)]
        y1 = [r.time for r in members if r.treatment == 1]
        y0 = [r.time for r in members if r.treatment == 0]
        oracle = math.fsum(y1) / len(y1) - math.fsum(y0) / len(y0)
        assert report.tau_hat == oracle
        assert report.n_treated == len(y1) and report.n_control == len(y0)
        leaf = tree.leaf(report.leaf_id)
        assert leaf.tau_hat == leaf.y_bar_treated - leaf.y_bar_control


def test_per_arm_minimums_in_every_leaf(planted):
    cohort, tree = planted
    cfg = tree.config
    train_ids = set(tree.train_ids)
    train = [r for r in cohort.records if r.id in train_ids]
    for report in extract_leaf_reports(tree, cohort.feature_names):
        assert report.n_treated >= cfg.min_treated_leaf
        assert report.n_control >= cfg.min_control_leaf
        members = [r for r in train if report.selects(r.covariates)]
        assert sum(r.treatment for r in members) >= cfg.min_treated_leaf
        assert sum(1 - r.treatment for r in members) >= cfg.min_control_leaf


def test_gain_nonnegative_at_accepted_splits(planted):
    _, tree = planted

    def walk(node):
        if isinstance(node, CausalSplit):
            assert node.gain >= 0
            walk(node.left)
            walk(node.right)

    walk(tree.root)


def test_honest_halves_partition_input(planted):
    cohort, tree = planted
    train, est = set(tree.train_ids), set(tree.estimation_ids)
    assert not train & est
    assert train | est == {r.id for r in cohort.records}
    assert abs(len(train) - len(est)) <= 1


def test_adaptive_mode_uses_all_records(planted):
    cohort, _ = planted
    tree = fit_causal_tree(cohort.records, CausalTreeConfig(honest=False), seed=0)
    assert tree.train_ids == tree.estimation_ids
    assert len(tree.train_ids) == len(cohort.records)


def test_uncensored_only_drops_censored():
    recs = _constant_effect(1)
    recs = [SurvivalRecord(r.id, r.time, int(r.id % 4 != 0), r.treatment, r.covariates) for r in recs]
    tree = fit_causal_tree(recs, CausalTreeConfig(uncensored_only=True), seed=0)
    used = set(tree.train_ids) | set(tree.estimation_ids)
    assert used == {r.id for r in recs if r.event == 1}


def test_random_candidate_mode_runs(planted):
    cohort, _ = planted
    tree = fit_causal_tree(cohort.records, CausalTreeConfig(split_candidates="random"), seed=1)
    assert tree.root.feature_index == 0


# -- leaf_assign -----------------------------------------------------------

def test_single_leaf_tree_assigns_everything():
    tree = _manual_tree(_leaf(0, 3.0))
    for x in ([0, 0], [1e9, -1e9]):
        assert leaf_assign(tree, x) == 0


def test_threshold_tie_routes_right():
    tree = _manual_tree(CausalSplit(0, 1.5, 1.0, _leaf(0, 1.0), _leaf(1, 2.0)))
    assert leaf_assign(tree, [1.5, 0]) == 1
    assert leaf_assign(tree, [1.4999, 0]) == 0


def test_leaf_assign_dimension_mismatch():
    with pytest.raises(ValueError):
        leaf_assign(_manual_tree(_leaf(0, 1.0)), [1.0])


def test_training_records_satisfy_their_leaf_path(planted):
    cohort, tree = planted
    reports = {r.leaf_id: r for r in extract_leaf_reports(tree, cohort.feature_names)}
    for rec in cohort.records:
        assert reports[leaf_assign(tree, rec.covariates)].selects(rec.covariates)


# -- reports -------------------------------------------------------------

def test_depth_one_report_format():
    tree = _manual_tree(CausalSplit(0, 1.5, 1.0, _leaf(0, 1.0), _leaf(1, 2.0)), p=1)
    left, right = extract_leaf_reports(tree, ["x_75"])
    assert [tuple(c[:3]) for c in left.path] == [("x_75", "<", 1.5)]
    assert [tuple(c[:3]) for c in right.path] == [("x_75", ">=", 1.5)]
    assert left.path_string() == "root → x_75 < 1.5"


def test_single_leaf_report_has_empty_path():
    (report,) = extract_leaf_reports(_manual_tree(_leaf(0, 4.0)))
    assert report.path == []
    assert report.tau_hat == 4.0


def test_sibling_leaves_differ_only_in_last_relation(planted):
    cohort, tree = planted
    reports = extract_leaf_reports(tree, cohort.feature_names)
    for a, b in zip(reports, reports[1:]):
        if len(a.path) == len(b.path) and a.path[:-1] == b.path[:-1]:
            assert a.path[-1].feature == b.path[-1].feature
            assert a.path[-1].threshold == b.path[-1].threshold
            assert {a.path[-1].relation, b.path[-1].relation} == {"<", ">="}


def test_reports_partition_covariate_space(planted):
    cohort, tree = planted
    reports = extract_leaf_reports(tree, cohort.feature_names)
    rng = np.random.default_rng(0)
    probes = rng.normal(0, 1.5, size=(10_000, tree.n_features))
    probes[:, 0] = rng.integers(0, 2, 10_000)
    for x in probes:
        assert sum(r.selects(x) for r in reports) == 1


# -- select_leaves -----------------------------------------------------------

def test_select_zero_threshold_takes_all(planted):
    _, tree = planted
    assert select_leaves(tree, 0.0) == [leaf.leaf_id for leaf in tree.leaves()]


def test_select_by_distance_from_root_effect():
    root = CausalSplit(0, 0.0, 1.0, _leaf(0, 20.0), CausalSplit(1, 0.0, 1.0, _leaf(1, 9.0), _leaf(2, -4.0)))
    tree = _manual_tree(root, root_tau=9.0)
    assert select_leaves(tree, 5.0) == [0, 2]


def test_select_planted_true_effect_leaves():
    cohort = generate_planted_effect(seed=5)
    cfg = CausalTreeConfig()
    level = permutation_gain_threshold(cohort.records, cfg, 5)
    tree = fit_causal_tree(cohort.records, CausalTreeConfig(min_effect_gain=level), 5)
    reports = extract_leaf_reports(tree, cohort.feature_names)
    chosen = select_leaves(tree, 5.0)
    assert len(chosen) == 2
    assert sorted(str(reports[i].path[0]).split()[1] for i in chosen) == ["<", ">="]
    assert all(reports[i].path[0].feature == "m" for i in chosen)


# -- export ------------------------------------------------------------------

def test_json_round_trip(planted):
    _, tree = planted
    back = CausalTree.from_json(tree.to_json())
    assert back.to_json() == tree.to_json()
    assert json.loads(tree.to_json())["root"]["feature"] == 0


def test_dot_export(planted):
    cohort, tree = planted
    dot = tree.to_dot(cohort.feature_names)
    assert dot.startswith("digraph")
    assert dot.count("tau =") == len(tree.leaves())
    assert "m < 0.5" in dot
