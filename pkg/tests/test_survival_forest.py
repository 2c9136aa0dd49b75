import json

import numpy as np
import pytest

from causal_survival.datagen import generate, get_scenario
from causal_survival.survival_core import SurvivalRecord, km_estimate, logrank_arrays
from causal_survival.survival_forest import (
    ForestConfig,
    LeafNode,
    SplitNode,
    SurvivalForest,
    _score_candidates,
    fit_survival_forest,
    fit_survival_tree,
    iter_leaves,
    oob_error,
    predict_survival,
)


def _separable(n=100, seed=0):
    rng = np.random.default_rng(seed)
    g = np.arange(n) % 2
    recs = []
    for i in range(n):
        t = 1.0 + rng.uniform(0, 0.5) if g[i] else 100.0 + rng.uniform(0, 5)
        recs.append(SurvivalRecord(i, t, 1, 0, (rng.standard_normal(), float(g[i]), rng.standard_normal())))
    return recs


def _depth(node):
    if isinstance(node, LeafNode):
        return 0
    return 1 + max(_depth(node.left), _depth(node.right))


@pytest.fixture(scope="module")
def hr4_continuous():
    # hazard ratio 4 per unit of covariate 0; covariates 1..4 are noise
    rng = np.random.default_rng(11)
    n = 1000
    X = rng.standard_normal((n, 5))
    t = rng.exponential(1.0, n) / (0.02 * 4.0 ** X[:, 0])
    c = rng.exponential(1 / 0.002, n)
    return [SurvivalRecord(i, float(min(t[i], c[i])), int(t[i] <= c[i]), 0, tuple(X[i])) for i in range(n)]


@pytest.fixture(scope="module")
def two_group():
    return generate(get_scenario("two_group_hr4", seed=3))


def test_config_validation():
    with pytest.raises(ValueError):
        ForestConfig(n_trees=0)
    with pytest.raises(ValueError):
        ForestConfig(min_leaf=2, min_events_leaf=3)
    assert ForestConfig().resolved_mtry(110) == 11


def test_root_splits_on_separating_feature():
    recs = _separable()
    tree = fit_survival_tree(recs, ForestConfig(mtry=3, min_leaf=5, min_events_leaf=1), np.random.default_rng(0))
    assert isinstance(tree, SplitNode)
    assert tree.feature_index == 1
    # direct computation: the perfect split beats every noise threshold
    t = np.array([r.time for r in recs])
    e = np.ones(len(recs), dtype=bool)
    X = np.array([r.covariates for r in recs])
    best = logrank_arrays(t, e, X[:, 1] < 0.5).chi_sq
    for f in (0, 2):
        for thr in np.quantile(X[:, f], np.linspace(0.1, 0.9, 17)):
            assert logrank_arrays(t, e, X[:, f] < thr).chi_sq < best


def test_no_covariate_variation_gives_single_km_leaf():
    recs = [SurvivalRecord(i, 5.0, 1, 0, (1.0, 2.0)) for i in range(40)]
    tree = fit_survival_tree(recs, ForestConfig(), np.random.default_rng(1))
    assert isinstance(tree, LeafNode)
    assert tree.curve == km_estimate(recs)


def test_tree_is_deterministic():
    recs = _separable(seed=4)
    cfg = ForestConfig(mtry=1, min_leaf=5, min_events_leaf=1)
    a = fit_survival_tree(recs, cfg, np.random.default_rng(9))
    b = fit_survival_tree(recs, cfg, np.random.default_rng(9))
    assert json.dumps(_tree_json(a)) == json.dumps(_tree_json(b))


def _tree_json(node):
    from causal_survival.survival_forest import tree_to_dict
    return tree_to_dict(node)


def test_tree_precondition():
    with pytest.raises(ValueError):
        fit_survival_tree(_separable(n=20), ForestConfig(), np.random.default_rng(0))
    no_events = [SurvivalRecord(i, 1.0 + i, 0, 0, (float(i),)) for i in range(40)]
    with pytest.raises(ValueError):
        fit_survival_tree(no_events, ForestConfig(), np.random.default_rng(0))


def test_candidate_scores_match_logrank():
    recs = _separable(seed=2)
    t = np.array([r.time for r in recs])
    e = np.ones(len(recs), dtype=bool)
    X = np.array([r.covariates for r in recs])
    order = np.argsort(t, kind="stable")
    feats = np.array([0, 0, 1, 2])
    thr = np.array([-0.5, 0.3, 0.5, 0.0])
    cfg = ForestConfig(min_leaf=1, min_events_leaf=1)
    scores = _score_candidates(t[order], e[order], X[order], feats, thr, cfg)
    for k in range(4):
        expected = logrank_arrays(t, e, X[:, feats[k]] < thr[k]).chi_sq
        assert scores[k] == pytest.approx(expected, rel=1e-12)


def test_single_tree_forest_equals_leaf_curve(two_group):
    cfg = ForestConfig(n_trees=1)
    forest = fit_survival_forest(two_group.records, cfg, seed=5)
    X = np.array([r.covariates for r in two_group.records[:50]])
    from causal_survival.survival_forest import apply_tree
    leaves = {leaf.index: leaf for leaf in iter_leaves(forest.trees[0])}
    ids = apply_tree(forest.trees[0], X)
    for x, leaf_id in zip(X, ids):
        pred = predict_survival(forest, x)
        assert np.array_equal(pred.probs, leaves[leaf_id].curve(forest.time_grid))


def test_identical_single_leaf_trees_predict_km():
    recs = _separable(seed=1)
    km = km_estimate(recs)
    leaf = LeafNode(km, len(recs), len(recs), 0)
    grid = km.times
    forest = SurvivalForest([leaf] * 7, grid, ForestConfig(n_trees=7), 0, 3)
    pred = predict_survival(forest, [0.0, 1.0, 0.0])
    assert np.allclose(pred.probs, km.probs, atol=1e-15)


def test_forest_thread_count_independent(two_group):
    cfg = ForestConfig(n_trees=24)
    a = fit_survival_forest(two_group.records, cfg, seed=42, n_jobs=1)
    b = fit_survival_forest(two_group.records, cfg, seed=42, n_jobs=8)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    assert np.array_equal(a.inbag_counts, b.inbag_counts)
    assert oob_error(a, two_group.records) == oob_error(b, two_group.records)


def test_forest_seeds_differ(two_group):
    cfg = ForestConfig(n_trees=5)
    a = fit_survival_forest(two_group.records, cfg, seed=1)
    b = fit_survival_forest(two_group.records, cfg, seed=2)
    assert json.dumps(a.to_dict()["trees"]) != json.dumps(b.to_dict()["trees"])


def test_predictions_valid_on_random_probes(two_group):
    forest = fit_survival_forest(two_group.records, ForestConfig(n_trees=30), seed=0)
    rng = np.random.default_rng(0)
    probes = rng.normal(0, 2, size=(1000, forest.n_features))
    probes[:, 0] = rng.integers(0, 2, 1000)
    S = forest.predict_matrix(probes)
    assert np.all(S >= 0) and np.all(S <= 1)
    assert np.all(np.diff(S, axis=1) <= 0)


def test_group_probe_closer_to_own_analytic_curve(two_group):
    forest = fit_survival_forest(two_group.records, ForestConfig(n_trees=100), seed=0)
    truth = two_group.truth.subgroups
    grid = forest.time_grid
    for g, own, other in ((1.0, "high", "low"), (0.0, "low", "high")):
        probe = np.zeros(forest.n_features)
        probe[0] = g
        pred = predict_survival(forest, probe).probs
        d_own = np.max(np.abs(pred - truth[own].survival(0, grid)))
        d_other = np.max(np.abs(pred - truth[other].survival(0, grid)))
        assert d_own < d_other


def test_dimension_mismatch(two_group):
    forest = fit_survival_forest(two_group.records, ForestConfig(n_trees=2), seed=0)
    with pytest.raises(ValueError):
        predict_survival(forest, [0.0, 1.0])


def test_leaf_constraints(two_group):
    cfg = ForestConfig(n_trees=20, min_leaf=15, min_events_leaf=3)
    forest = fit_survival_forest(two_group.records, cfg, seed=8)
    for tree in forest.trees:
        if isinstance(tree, LeafNode):
            continue
        for leaf in iter_leaves(tree):
            assert leaf.n_samples >= cfg.min_leaf
            assert leaf.n_events >= cfg.min_events_leaf


def test_max_depth_is_respected(two_group):
    forest = fit_survival_forest(two_group.records, ForestConfig(n_trees=5, max_depth=2), seed=0)
    assert max(_depth(t) for t in forest.trees) <= 2


def test_json_round_trip_is_lossless(two_group):
    forest = fit_survival_forest(two_group.records, ForestConfig(n_trees=10), seed=3)
    text = json.dumps(forest.to_dict())
    back = SurvivalForest.from_dict(json.loads(text))
    assert json.dumps(back.to_dict()) == text
    X = np.array([r.covariates for r in two_group.records[:100]])
    assert np.array_equal(back.predict_matrix(X), forest.predict_matrix(X))


def test_oob_error_strong_signal(hr4_continuous):
    forest = fit_survival_forest(hr4_continuous, ForestConfig(n_trees=100), seed=0)
    assert oob_error(forest, hr4_continuous) <= 0.3


def test_oob_error_noise_near_half():
    cohort = generate(get_scenario("pure_noise", seed=2))
    forest = fit_survival_forest(cohort.records, ForestConfig(n_trees=100), seed=0)
    assert abs(oob_error(forest, cohort.records) - 0.5) <= 0.05


def test_oob_coverage_at_500_records():
    cohort = generate(get_scenario("pure_noise", seed=4, n=500))
    forest = fit_survival_forest(cohort.records, ForestConfig(n_trees=200), seed=0)
    assert np.all((forest.inbag_counts == 0).sum(axis=0) > 0)
    oob_error(forest, cohort.records)


def test_oob_requires_membership(two_group):
    forest = fit_survival_forest(two_group.records, ForestConfig(n_trees=2), seed=0)
    back = SurvivalForest.from_dict(forest.to_dict())
    with pytest.raises(ValueError):
        oob_error(back, two_group.records)


@pytest.mark.slow
def test_more_trees_do_not_hurt_oob_error():
    cohort = generate(get_scenario("two_group_hr4", seed=21, n=500))
    small, large = [], []
    for seed in range(5):
        small.append(oob_error(fit_survival_forest(cohort.records, ForestConfig(n_trees=50), seed), cohort.records))
        large.append(oob_error(fit_survival_forest(cohort.records, ForestConfig(n_trees=400), seed), cohort.records))
    assert np.mean(large) <= np.mean(small) + 0.02
