"""Random survival forest with log-rank splitting.

Each tree is grown on a bootstrap sample.  At every node ``mtry`` features are
drawn and ``n_split_candidates`` random thresholds per feature are scored by
the two-sample log-rank chi-square; the best admissible candidate wins.  Leaves
hold the Kaplan-Meier curve of their in-bag records and the forest averages
leaf curves on a shared grid of training event times.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from .survival_core import (
    SurvivalCurve,
    SurvivalRecord,
    concordance_arrays,
    km_from_arrays,
    records_to_arrays,
)

MORTALITY_FLOOR = 1e-12


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 200
    mtry: Optional[int] = None  # None -> ceil(sqrt(p))
    min_leaf: int = 15
    min_events_leaf: int = 3
    n_split_candidates: int = 10
    max_depth: Optional[int] = None

    def __post_init__(self):
        for name in ("n_trees", "min_leaf", "min_events_leaf", "n_split_candidates"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"ForestConfig.{name} must be a positive integer, got {value!r}")
        for name in ("mtry", "max_depth"):
            value = getattr(self, name)
            if value is not None and (not isinstance(value, (int, np.integer)) or value < 1):
                raise ValueError(f"ForestConfig.{name} must be a positive integer or None, got {value!r}")
        if self.min_events_leaf > self.min_leaf:
            raise ValueError("ForestConfig.min_events_leaf must not exceed min_leaf")

    def resolved_mtry(self, p: int) -> int:
        if p == 0:
            return 0
        if self.mtry is None:
            return max(1, math.ceil(math.sqrt(p)))
        return min(self.mtry, p)


@dataclass
class LeafNode:
    curve: SurvivalCurve
    n_samples: int
    n_events: int
    index: int = 0


@dataclass
class SplitNode:
    """Internal node; a covariate vector goes left iff ``x[feature_index] < threshold``."""

    feature_index: int
    threshold: float
    left: "SurvivalTreeNode"
    right: "SurvivalTreeNode"


SurvivalTreeNode = Union[LeafNode, SplitNode]


def iter_leaves(node: SurvivalTreeNode):
    if isinstance(node, LeafNode):
        yield node
    else:
        yield from iter_leaves(node.left)
        yield from iter_leaves(node.right)


def tree_features(node: SurvivalTreeNode) -> set:
    if isinstance(node, LeafNode):
        return set()
    return {node.feature_index} | tree_features(node.left) | tree_features(node.right)


def _score_candidates(ts, es, Xs, feats, thresholds, cfg: ForestConfig):
    """Log-rank chi-square for each (feature, threshold) candidate at a node.

    ``ts``/``es``/``Xs`` are the node's records sorted by time.  Returns the
    scores with inadmissible or degenerate candidates set to ``-inf``.
    """
    m = ts.size
    event_times = np.unique(ts[es])
    lo = np.searchsorted(ts, event_times, side="left")
    hi = np.searchsorted(ts, event_times, side="right")
    cum_e = np.concatenate(([0], np.cumsum(es)))
    n = (m - lo).astype(float)
    d = (cum_e[hi] - cum_e[lo]).astype(float)

    left = (Xs[:, feats] < thresholds).T  # candidates x records
    zeros = np.zeros((left.shape[0], 1), dtype=np.int64)
    cum_l = np.concatenate((zeros, np.cumsum(left, axis=1)), axis=1)
    cum_le = np.concatenate((zeros, np.cumsum(left & es, axis=1)), axis=1)
    n_left_total = cum_l[:, -1]
    e_left_total = cum_le[:, -1]

    n_l = n_left_total[:, None] - cum_l[:, lo]
    d_l = cum_le[:, hi] - cum_le[:, lo]
    frac = n_l / n
    expected = np.sum(d * frac, axis=1)
    observed = np.sum(d_l, axis=1)
    shrink = np.where(n > 1, (n - d) / np.where(n > 1, n - 1, 1.0), 0.0)
    variance = np.sum(d * frac * (1 - frac) * shrink, axis=1)

    admissible = (
        (n_left_total >= cfg.min_leaf)
        & (m - n_left_total >= cfg.min_leaf)
        & (e_left_total >= cfg.min_events_leaf)
        & (cum_e[-1] - e_left_total >= cfg.min_events_leaf)
        & (variance > 0)
    )
    scores = np.full(left.shape[0], -np.inf)
    ok = admissible
    diff = observed[ok] - expected[ok]
    scores[ok] = diff * diff / variance[ok]
    return scores


class _Grower:
    def __init__(self, time, event, X, cfg: ForestConfig, rng: np.random.Generator):
        self.time = time
        self.event = event.astype(bool)
        self.X = X
        self.cfg = cfg
        self.rng = rng
        self.mtry = cfg.resolved_mtry(X.shape[1])
        self.n_leaves = 0

    def leaf(self, idx) -> LeafNode:
        node = LeafNode(
            curve=km_from_arrays(self.time[idx], self.event[idx]),
            n_samples=int(idx.size),
            n_events=int(self.event[idx].sum()),
            index=self.n_leaves,
        )
        self.n_leaves += 1
        return node

    def grow(self, idx, depth) -> SurvivalTreeNode:
        cfg = self.cfg
        n_events = int(self.event[idx].sum())
        if (
            (cfg.max_depth is not None and depth >= cfg.max_depth)
            or idx.size < 2 * cfg.min_leaf
            or n_events < 2 * cfg.min_events_leaf
        ):
            return self.leaf(idx)

        p = self.X.shape[1]
        if p == 0:
            return self.leaf(idx)
        feats = np.sort(self.rng.choice(p, size=self.mtry, replace=False))
        order = np.argsort(self.time[idx], kind="stable")
        node_idx = idx[order]
        ts = self.time[node_idx]
        es = self.event[node_idx]
        Xs = self.X[node_idx]

        cand_feats = []
        cand_thr = []
        for f in feats:
            col = Xs[:, f]
            lo, hi = col.min(), col.max()
            thr = np.sort(self.rng.uniform(lo, hi, size=cfg.n_split_candidates))
            if lo == hi:
                continue
            cand_feats.append(np.full(thr.size, f))
            cand_thr.append(thr)
        if not cand_feats:
            return self.leaf(idx)
        cand_feats = np.concatenate(cand_feats)
        cand_thr = np.concatenate(cand_thr)
        scores = _score_candidates(ts, es, Xs, cand_feats, cand_thr, cfg)
        best = int(np.argmax(scores))
        if not np.isfinite(scores[best]):
            return self.leaf(idx)

        f, thr = int(cand_feats[best]), float(cand_thr[best])
        go_left = self.X[idx, f] < thr
        left = self.grow(idx[go_left], depth + 1)
        right = self.grow(idx[~go_left], depth + 1)
        return SplitNode(f, thr, left, right)


def _grow_tree(time, event, X, cfg, rng) -> SurvivalTreeNode:
    if time.size < 2 * cfg.min_leaf:
        raise ValueError(
            f"survival tree needs at least {2 * cfg.min_leaf} records, got {time.size}"
        )
    if not np.any(event):
        raise ValueError("survival tree needs at least one event")
    return _Grower(time, event, X, cfg, rng).grow(np.arange(time.size), 0)


def fit_survival_tree(
    records: Sequence[SurvivalRecord],
    config: ForestConfig,
    rng_stream: np.random.Generator,
) -> SurvivalTreeNode:
    """Grow one log-rank survival tree on ``records`` (no resampling)."""
    time, event, _, X = records_to_arrays(records)
    return _grow_tree(time, event, X, config, rng_stream)


def apply_tree(node: SurvivalTreeNode, X: np.ndarray) -> np.ndarray:
    """Leaf index reached by every row of ``X``."""
    out = np.empty(X.shape[0], dtype=np.int64)

    def walk(node, rows):
        if rows.size == 0:
            return
        if isinstance(node, LeafNode):
            out[rows] = node.index
            return
        go_left = X[rows, node.feature_index] < node.threshold
        walk(node.left, rows[go_left])
        walk(node.right, rows[~go_left])

    walk(node, np.arange(X.shape[0]))
    return out


def tree_to_dict(node: SurvivalTreeNode) -> dict:
    if isinstance(node, LeafNode):
        return {
            "leaf": node.index,
            "n_samples": node.n_samples,
            "n_events": node.n_events,
            "curve": node.curve.to_dict(),
        }
    return {
        "feature": node.feature_index,
        "threshold": node.threshold,
        "left": tree_to_dict(node.left),
        "right": tree_to_dict(node.right),
    }


def tree_from_dict(d: dict) -> SurvivalTreeNode:
    if "leaf" in d:
        return LeafNode(
            curve=SurvivalCurve.from_dict(d["curve"]),
            n_samples=int(d["n_samples"]),
            n_events=int(d["n_events"]),
            index=int(d["leaf"]),
        )
    return SplitNode(
        int(d["feature"]),
        float(d["threshold"]),
        tree_from_dict(d["left"]),
        tree_from_dict(d["right"]),
    )


@dataclass(eq=False)
class SurvivalForest:
    trees: List[SurvivalTreeNode]
    time_grid: np.ndarray
    config: ForestConfig
    seed: int
    n_features: int
    # (n_trees, n_train) bootstrap multiplicities; None after JSON import
    inbag_counts: Optional[np.ndarray] = None
    _leaf_values: List[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.time_grid = np.asarray(self.time_grid, dtype=float)
        if not self._leaf_values:
            self._leaf_values = [_leaf_matrix(t, self.time_grid) for t in self.trees]

    def tree_survival(self, tree_index: int, X: np.ndarray) -> np.ndarray:
        """Leaf curves of one tree for rows of ``X``, on ``time_grid``."""
        return self._leaf_values[tree_index][apply_tree(self.trees[tree_index], X)]

    def predict_matrix(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ValueError(
                f"expected {self.n_features} covariates, got {X.shape[1]}"
            )
        total = np.zeros((X.shape[0], self.time_grid.size))
        for i in range(len(self.trees)):
            total += self.tree_survival(i, X)
        mean = np.clip(total / len(self.trees), 0.0, 1.0)
        return np.minimum.accumulate(mean, axis=1)

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "seed": self.seed,
            "n_features": self.n_features,
            "time_grid": self.time_grid.tolist(),
            "trees": [tree_to_dict(t) for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SurvivalForest":
        return cls(
            trees=[tree_from_dict(t) for t in d["trees"]],
            time_grid=np.array(d["time_grid"], dtype=float),
            config=ForestConfig(**d["config"]),
            seed=int(d["seed"]),
            n_features=int(d["n_features"]),
        )


def _leaf_matrix(tree: SurvivalTreeNode, grid: np.ndarray) -> np.ndarray:
    leaves = sorted(iter_leaves(tree), key=lambda leaf: leaf.index)
    return np.vstack([leaf.curve(grid) for leaf in leaves]) if leaves else np.ones((0, grid.size))


def tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(tree_index)]))


def fit_forest_arrays(time, event, X, config: ForestConfig, seed: int, n_jobs: int = 1) -> SurvivalForest:
    time = np.asarray(time, dtype=float)
    event = np.asarray(event).astype(bool)
    X = np.asarray(X, dtype=float)
    n = time.size
    if n < 2 * config.min_leaf:
        raise ValueError(f"survival forest needs at least {2 * config.min_leaf} records, got {n}")
    if not event.any():
        raise ValueError("survival forest needs at least one event")

    def one_tree(b):
        rng = tree_rng(seed, b)
        boot = rng.integers(0, n, size=n)
        tree = _grow_tree(time[boot], event[boot], X[boot], config, rng)
        return tree, np.bincount(boot, minlength=n)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            fitted = list(pool.map(one_tree, range(config.n_trees)))
    else:
        fitted = [one_tree(b) for b in range(config.n_trees)]
    return SurvivalForest(
        trees=[t for t, _ in fitted],
        time_grid=np.unique(time[event]),
        config=config,
        seed=int(seed),
        n_features=X.shape[1],
        inbag_counts=np.vstack([c for _, c in fitted]).astype(np.int32),
    )


def fit_survival_forest(
    records: Sequence[SurvivalRecord],
    config: ForestConfig,
    seed: int,
    n_jobs: int = 1,
) -> SurvivalForest:
    """Fit ``config.n_trees`` bootstrap trees.

    Tree ``b`` draws its bootstrap and split randomness from a stream seeded by
    ``(seed, b)``, so the result does not depend on ``n_jobs``.
    """
    time, event, _, X = records_to_arrays(records)
    return fit_forest_arrays(time, event, X, config, seed, n_jobs=n_jobs)


def predict_survival(forest: SurvivalForest, covariates) -> SurvivalCurve:
    """Ensemble-mean survival curve for one covariate vector."""
    x = np.asarray(covariates, dtype=float).reshape(1, -1)
    return SurvivalCurve(forest.time_grid, forest.predict_matrix(x)[0])


def mortality_scores(surv: np.ndarray) -> np.ndarray:
    """Cumulative-hazard proxy: sum over the grid of ``-log S``."""
    return np.sum(-np.log(np.maximum(surv, MORTALITY_FLOOR)), axis=-1)


def oob_survival(forest: SurvivalForest, X) -> tuple:
    """Out-of-bag mean survival per training row and its OOB tree count."""
    if forest.inbag_counts is None:
        raise ValueError("forest carries no bootstrap membership (imported from JSON?)")
    X = np.asarray(X, dtype=float)
    n = forest.inbag_counts.shape[1]
    if X.shape[0] != n:
        raise ValueError(f"forest was trained on {n} records, got {X.shape[0]}")
    total = np.zeros((n, forest.time_grid.size))
    count = np.zeros(n, dtype=np.int64)
    for b in range(len(forest.trees)):
        rows = np.flatnonzero(forest.inbag_counts[b] == 0)
        if rows.size == 0:
            continue
        total[rows] += forest.tree_survival(b, X[rows])
        count[rows] += 1
    covered = count > 0
    surv = np.zeros_like(total)
    surv[covered] = total[covered] / count[covered, None]
    return surv, count


def oob_error(forest: SurvivalForest, records: Sequence[SurvivalRecord]) -> float:
    """``1 - C`` with each record scored by its out-of-bag ensemble mortality.

    ``records`` must be the training records in training order.
    """
    time, event, _, X = records_to_arrays(records)
    surv, count = oob_survival(forest, X)
    covered = count > 0
    if not covered.any():
        raise ValueError("no record is out-of-bag for any tree")
    risk = mortality_scores(surv[covered])
    return 1.0 - concordance_arrays(risk, time[covered], event[covered])
