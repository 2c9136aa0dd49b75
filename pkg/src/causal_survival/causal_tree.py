"""Causal tree: recursive partitioning on treatment-effect heterogeneity.

Splits maximise the size-weighted squared-effect gain

    sum_children n_c * tau_c**2 - n_parent * tau_parent**2

where ``tau`` is the treated-minus-control mean outcome on the training half.
With ``honest=True`` the leaf effects are re-estimated on a disjoint
estimation half, and per-arm minimum counts are enforced on both halves.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Union

import numpy as np

from .survival_core import SurvivalRecord, records_to_arrays

SPLIT_CANDIDATE_MODES = ("midpoints", "random")


@dataclass(frozen=True)
class CausalTreeConfig:
    honest: bool = True
    min_treated_leaf: int = 10
    min_control_leaf: int = 10
    max_depth: int = 4
    min_effect_gain: float = 0.0
    split_candidates: str = "midpoints"
    n_random_candidates: int = 10
    uncensored_only: bool = False

    def __post_init__(self):
        if self.min_treated_leaf < 2 or self.min_control_leaf < 2:
            raise ValueError("per-arm leaf minimums must be at least 2")
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")
        if not self.min_effect_gain >= 0:
            raise ValueError("min_effect_gain must be nonnegative")
        if self.split_candidates not in SPLIT_CANDIDATE_MODES:
            raise ValueError(f"split_candidates must be one of {SPLIT_CANDIDATE_MODES}")
        if self.n_random_candidates < 1:
            raise ValueError("n_random_candidates must be positive")


@dataclass
class CausalLeaf:
    leaf_id: int
    tau_hat: float
    n_treated: int
    n_control: int
    y_bar_treated: float
    y_bar_control: float


@dataclass
class CausalSplit:
    """Internal node; ``x[feature_index] < threshold`` goes left."""

    feature_index: int
    threshold: float
    gain: float
    left: "CausalNode"
    right: "CausalNode"


CausalNode = Union[CausalLeaf, CausalSplit]


class PathCondition(NamedTuple):
    feature: str
    relation: str  # "<" or ">="
    threshold: float
    feature_index: int

    def holds(self, x) -> bool:
        value = x[self.feature_index]
        return value < self.threshold if self.relation == "<" else value >= self.threshold

    def __str__(self):
        return f"{self.feature} {self.relation} {self.threshold:g}"


@dataclass
class LeafReport:
    leaf_id: int
    path: List[PathCondition]
    tau_hat: float
    n_treated: int
    n_control: int

    def selects(self, x) -> bool:
        return all(c.holds(x) for c in self.path)

    def path_string(self) -> str:
        return " → ".join(["root"] + [str(c) for c in self.path])

    def to_dict(self) -> dict:
        return {
            "leaf_id": self.leaf_id,
            "path": [
                {"feature": c.feature, "relation": c.relation, "threshold": c.threshold,
                 "feature_index": c.feature_index}
                for c in self.path
            ],
            "path_string": self.path_string(),
            "tau_hat": self.tau_hat,
            "n_treated": self.n_treated,
            "n_control": self.n_control,
        }

    @classmethod
    def from_dict(cls, d) -> "LeafReport":
        return cls(
            leaf_id=int(d["leaf_id"]),
            path=[PathCondition(c["feature"], c["relation"], float(c["threshold"]), int(c["feature_index"]))
                  for c in d["path"]],
            tau_hat=float(d["tau_hat"]),
            n_treated=int(d["n_treated"]),
            n_control=int(d["n_control"]),
        )


@dataclass(eq=False)
class CausalTree:
    root: CausalNode
    config: CausalTreeConfig
    n_features: int
    root_tau: float
    train_ids: list = field(default_factory=list)
    estimation_ids: list = field(default_factory=list)

    def leaves(self) -> List[CausalLeaf]:
        out = []

        def walk(node):
            if isinstance(node, CausalLeaf):
                out.append(node)
            else:
                walk(node.left)
                walk(node.right)

        walk(self.root)
        return out

    def leaf(self, leaf_id: int) -> CausalLeaf:
        for leaf in self.leaves():
            if leaf.leaf_id == leaf_id:
                return leaf
        raise KeyError(f"no leaf {leaf_id}")

    def split_features(self) -> List[int]:
        found = set()

        def walk(node):
            if isinstance(node, CausalSplit):
                found.add(node.feature_index)
                walk(node.left)
                walk(node.right)

        walk(self.root)
        return sorted(found)

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "n_features": self.n_features,
            "root_tau": self.root_tau,
            "train_ids": list(self.train_ids),
            "estimation_ids": list(self.estimation_ids),
            "root": _node_to_dict(self.root),
        }

    @classmethod
    def from_dict(cls, d) -> "CausalTree":
        return cls(
            root=_node_from_dict(d["root"]),
            config=CausalTreeConfig(**d["config"]),
            n_features=int(d["n_features"]),
            root_tau=float(d["root_tau"]),
            train_ids=list(d["train_ids"]),
            estimation_ids=list(d["estimation_ids"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "CausalTree":
        return cls.from_dict(json.loads(text))

    def to_dot(self, feature_names: Optional[Sequence[str]] = None) -> str:
        names = _names(feature_names, self.n_features)
        lines = ["digraph causal_tree {", "  node [shape=box];"]
        counter = [0]

        def emit(node) -> str:
            key = f"n{counter[0]}"
            counter[0] += 1
            if isinstance(node, CausalLeaf):
                label = (f"leaf {node.leaf_id}\\ntau = {node.tau_hat:.2f}\\n"
                         f"treated {node.n_treated} / control {node.n_control}")
                lines.append(f'  {key} [label="{label}"];')
                return key
            label = f"{names[node.feature_index]} < {node.threshold:g}"
            lines.append(f'  {key} [label="{label}"];')
            left = emit(node.left)
            right = emit(node.right)
            lines.append(f'  {key} -> {left} [label="yes"];')
            lines.append(f'  {key} -> {right} [label="no"];')
            return key

        emit(self.root)
        lines.append("}")
        return "\n".join(lines) + "\n"


def _node_to_dict(node: CausalNode) -> dict:
    if isinstance(node, CausalLeaf):
        return {"leaf": asdict(node)}
    return {
        "feature": node.feature_index,
        "threshold": node.threshold,
        "gain": node.gain,
        "left": _node_to_dict(node.left),
        "right": _node_to_dict(node.right),
    }


def _node_from_dict(d: dict) -> CausalNode:
    if "leaf" in d:
        return CausalLeaf(**d["leaf"])
    return CausalSplit(
        int(d["feature"]), float(d["threshold"]), float(d["gain"]),
        _node_from_dict(d["left"]), _node_from_dict(d["right"]),
    )


def _names(feature_names, p) -> List[str]:
    if feature_names is None:
        return [f"x{j}" for j in range(p)]
    if len(feature_names) != p:
        raise ValueError(f"expected {p} feature names, got {len(feature_names)}")
    return list(feature_names)


def _arm_mean(y, mask) -> float:
    values = y[mask]
    return math.fsum(values.tolist()) / values.size


def _id_key(record):
    return (type(record.id).__name__, record.id)


def _canonical(records: Sequence[SurvivalRecord]) -> List[SurvivalRecord]:
    ordered = sorted(records, key=_id_key)
    ids = [r.id for r in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError("record ids must be unique")
    return ordered


def honest_split(records: Sequence[SurvivalRecord], config: CausalTreeConfig, seed: int):
    """Canonicalise and split records into (train, estimation) halves."""
    ordered = _canonical(records)
    if config.uncensored_only:
        ordered = [r for r in ordered if r.event == 1]
    if not config.honest:
        return ordered, ordered
    perm = np.random.default_rng(seed).permutation(len(ordered))
    half = len(ordered) // 2
    train = [ordered[i] for i in sorted(perm[:half])]
    est = [ordered[i] for i in sorted(perm[half:])]
    return train, est


class _SplitSearch:
    def __init__(self, X, y, w, X_est, w_est, config: CausalTreeConfig, rng):
        self.X, self.y, self.w = X, y, w
        self.X_est, self.w_est = X_est, w_est
        self.cfg = config
        self.rng = rng

    def _candidates(self, col):
        uniq = np.unique(col)
        if uniq.size < 2:
            return np.empty(0)
        if self.cfg.split_candidates == "midpoints":
            return (uniq[:-1] + uniq[1:]) / 2.0
        return np.unique(self.rng.uniform(uniq[0], uniq[-1], size=self.cfg.n_random_candidates))

    def best(self, rows, est_rows):
        """Best (gain, feature, threshold) at a node, or None."""
        cfg = self.cfg
        y = self.y[rows]
        w = self.w[rows]
        treated = w == 1
        n = rows.size
        tau_parent = y[treated].mean() - y[~treated].mean()
        parent_term = n * tau_parent * tau_parent
        w_est = self.w_est[est_rows]

        best = None
        for f in range(self.X.shape[1]):
            col = self.X[rows, f]
            thr = self._candidates(col)
            if thr.size == 0:
                continue
            stats = {}
            for arm, mask in ((1, treated), (0, ~treated)):
                xs_order = np.argsort(col[mask], kind="stable")
                xs = col[mask][xs_order]
                cum = np.concatenate(([0.0], np.cumsum(y[mask][xs_order])))
                n_left = np.searchsorted(xs, thr, side="left")
                stats[arm] = (n_left, xs.size - n_left, cum[n_left], cum[-1] - cum[n_left])
            n1l, n1r, s1l, s1r = stats[1]
            n0l, n0r, s0l, s0r = stats[0]
            ok = (
                (n1l >= cfg.min_treated_leaf) & (n1r >= cfg.min_treated_leaf)
                & (n0l >= cfg.min_control_leaf) & (n0r >= cfg.min_control_leaf)
            )
            if cfg.honest:
                est_col = self.X_est[est_rows, f]
                e1 = np.sort(est_col[w_est == 1])
                e0 = np.sort(est_col[w_est == 0])
                e1l = np.searchsorted(e1, thr, side="left")
                e0l = np.searchsorted(e0, thr, side="left")
                ok &= (
                    (e1l >= cfg.min_treated_leaf) & (e1.size - e1l >= cfg.min_treated_leaf)
                    & (e0l >= cfg.min_control_leaf) & (e0.size - e0l >= cfg.min_control_leaf)
                )
            if not ok.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                tau_l = s1l / n1l - s0l / n0l
                tau_r = s1r / n1r - s0r / n0r
                gain = (n1l + n0l) * tau_l**2 + (n1r + n0r) * tau_r**2 - parent_term
            gain = np.where(ok, gain, -np.inf)
            k = int(np.argmax(gain))
            if best is None or gain[k] > best[0]:
                best = (float(gain[k]), f, float(thr[k]))
        return best


def _grow(search: _SplitSearch, rows, est_rows, depth, leaves: list) -> CausalNode:
    cfg = search.cfg
    if depth < cfg.max_depth:
        found = search.best(rows, est_rows)
        if found is not None and found[0] > cfg.min_effect_gain:
            gain, f, thr = found
            go_left = search.X[rows, f] < thr
            est_left = search.X_est[est_rows, f] < thr
            left = _grow(search, rows[go_left], est_rows[est_left], depth + 1, leaves)
            right = _grow(search, rows[~go_left], est_rows[~est_left], depth + 1, leaves)
            return CausalSplit(f, thr, gain, left, right)
    return _make_leaf(search, est_rows, leaves)


def _make_leaf(search: _SplitSearch, est_rows, leaves: list) -> CausalLeaf:
    y = search.y_est[est_rows]
    w = search.w_est[est_rows]
    y1 = _arm_mean(y, w == 1)
    y0 = _arm_mean(y, w == 0)
    leaf = CausalLeaf(
        leaf_id=len(leaves),
        tau_hat=y1 - y0,
        n_treated=int(np.sum(w == 1)),
        n_control=int(np.sum(w == 0)),
        y_bar_treated=y1,
        y_bar_control=y0,
    )
    leaves.append(leaf)
    return leaf


def _prepare(records, config, seed):
    train, est = honest_split(records, config, seed)
    if not train or not est:
        raise ValueError("both treatments required")
    t_time, _, t_w, t_X = records_to_arrays(train)
    e_time, _, e_w, e_X = records_to_arrays(est)
    for w in (t_w, e_w):
        if not (np.any(w == 1) and np.any(w == 0)):
            raise ValueError("both treatments required")
    search = _SplitSearch(t_X, t_time, t_w, e_X, e_w, config, np.random.default_rng([int(seed), 1]))
    search.y_est = e_time
    return train, est, search


def fit_causal_tree(records: Sequence[SurvivalRecord], config: CausalTreeConfig, seed: int) -> CausalTree:
    """Grow a causal tree on observed times as the outcome."""
    if not records:
        raise ValueError("both treatments required")
    arms = {r.treatment for r in records}
    if arms != {0, 1}:
        raise ValueError("both treatments required")
    train, est, search = _prepare(records, config, seed)
    leaves: list = []
    root = _grow(search, np.arange(len(train)), np.arange(len(est)), 0, leaves)
    all_est = np.ones(len(est), dtype=bool)
    root_tau = _arm_mean(search.y_est, all_est & (search.w_est == 1)) - _arm_mean(
        search.y_est, all_est & (search.w_est == 0)
    )
    return CausalTree(
        root=root,
        config=config,
        n_features=search.X.shape[1],
        root_tau=root_tau,
        train_ids=[r.id for r in train],
        estimation_ids=[r.id for r in est],
    )


def root_gain(records: Sequence[SurvivalRecord], config: CausalTreeConfig, seed: int) -> float:
    """Best split gain available at the root, ignoring ``min_effect_gain``."""
    train, est, search = _prepare(records, config, seed)
    found = search.best(np.arange(len(train)), np.arange(len(est)))
    return 0.0 if found is None else found[0]


def permutation_gain_threshold(
    records: Sequence[SurvivalRecord],
    config: CausalTreeConfig,
    seed: int,
    n_permutations: int = 99,
    quantile: float = 0.99,
) -> float:
    """Gain level a split on pure-noise covariates exceeds with prob ``1 - quantile``.

    Covariate rows are permuted against (outcome, arm) to destroy any
    heterogeneity while keeping marginals; the best root gain is recorded for
    each permutation.  Use the result as ``min_effect_gain``.
    """
    train, est, search = _prepare(records, config, seed)
    rng = np.random.default_rng([int(seed), 2])
    X, X_est = search.X.copy(), search.X_est.copy()
    rows, est_rows = np.arange(len(train)), np.arange(len(est))
    gains = []
    for _ in range(n_permutations):
        search.X = X[rng.permutation(len(train))]
        search.X_est = X_est[rng.permutation(len(est))]
        found = search.best(rows, est_rows)
        gains.append(0.0 if found is None else found[0])
    return float(np.quantile(gains, quantile))


def leaf_assign(tree: CausalTree, covariates) -> int:
    """Leaf id reached by ``covariates``; values equal to a threshold go right."""
    x = np.asarray(covariates, dtype=float).reshape(-1)
    if x.size != tree.n_features:
        raise ValueError(f"expected {tree.n_features} covariates, got {x.size}")
    node = tree.root
    while isinstance(node, CausalSplit):
        node = node.left if x[node.feature_index] < node.threshold else node.right
    return node.leaf_id


def extract_leaf_reports(tree: CausalTree, feature_names: Optional[Sequence[str]] = None) -> List[LeafReport]:
    """One report per leaf, with the root-to-leaf conditions in order."""
    names = _names(feature_names, tree.n_features)
    reports = []

    def walk(node, path):
        if isinstance(node, CausalLeaf):
            reports.append(LeafReport(node.leaf_id, list(path), node.tau_hat, node.n_treated, node.n_control))
            return
        name = names[node.feature_index]
        walk(node.left, path + [PathCondition(name, "<", node.threshold, node.feature_index)])
        walk(node.right, path + [PathCondition(name, ">=", node.threshold, node.feature_index)])

    walk(tree.root, [])
    return reports


def select_leaves(tree: CausalTree, ate_threshold: float) -> List[int]:
    """Leaves whose effect differs from the root effect by at least ``ate_threshold``."""
    if ate_threshold < 0:
        raise ValueError("ate_threshold must be nonnegative")
    return [leaf.leaf_id for leaf in tree.leaves() if abs(leaf.tau_hat - tree.root_tau) >= ate_threshold]
