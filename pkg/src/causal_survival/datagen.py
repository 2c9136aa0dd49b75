"""Synthetic cohorts with exponential hazards and known ground truth.

Patients fall into subgroups defined by rules on a few moderator covariates;
each (subgroup, arm) cell has its own constant hazard, so the true survival,
median and restricted mean are available in closed form.  Moderators occupy
the lowest feature indices, followed by standard-normal noise features.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .survival_core import SurvivalRecord

MODERATOR_KINDS = ("binary", "uniform")
RULE_OPS = ("<", ">=", "==")


@dataclass(frozen=True)
class Moderator:
    name: str
    kind: str = "binary"  # Bernoulli(0.5) or Uniform(0, 1)

    def __post_init__(self):
        if self.kind not in MODERATOR_KINDS:
            raise ValueError(f"moderator {self.name!r}: kind must be one of {MODERATOR_KINDS}")


@dataclass(frozen=True)
class Subgroup:
    name: str
    hazard_t0: float
    hazard_t1: float
    rule: Tuple[Tuple[str, str, float], ...] = ()

    def __post_init__(self):
        if not (self.hazard_t0 > 0 and self.hazard_t1 > 0):
            raise ValueError(f"subgroup {self.name!r}: hazards must be positive")
        rule = tuple((str(m), str(op), float(v)) for m, op, v in self.rule)
        for _, op, _ in rule:
            if op not in RULE_OPS:
                raise ValueError(f"subgroup {self.name!r}: unknown operator {op!r}")
        object.__setattr__(self, "rule", rule)

    def hazard(self, arm: int) -> float:
        return self.hazard_t1 if arm == 1 else self.hazard_t0

    def matches(self, M: np.ndarray, index: Dict[str, int]) -> np.ndarray:
        out = np.ones(M.shape[0], dtype=bool)
        for name, op, value in self.rule:
            col = M[:, index[name]]
            if op == "<":
                out &= col < value
            elif op == ">=":
                out &= col >= value
            else:
                out &= col == value
        return out


@dataclass(frozen=True)
class ScenarioSpec:
    n: int
    p: int  # noise covariates after the moderators
    subgroups: Tuple[Subgroup, ...]
    moderators: Tuple[Moderator, ...] = ()
    censoring_hazard: float = 0.0
    treat_prob: float = 0.5
    admin_cutoff: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "subgroups", tuple(self.subgroups))
        object.__setattr__(self, "moderators", tuple(self.moderators))
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.p < 0:
            raise ValueError("p must be nonnegative")
        if not self.subgroups:
            raise ValueError("at least one subgroup is required")
        if len({s.name for s in self.subgroups}) != len(self.subgroups):
            raise ValueError("subgroup names must be unique")
        names = [m.name for m in self.moderators]
        if len(set(names)) != len(names):
            raise ValueError("moderator names must be unique")
        for s in self.subgroups:
            for m, _, _ in s.rule:
                if m not in names:
                    raise ValueError(f"subgroup {s.name!r} refers to unknown moderator {m!r}")
        if not self.censoring_hazard >= 0:
            raise ValueError("censoring_hazard must be nonnegative")
        if not 0 < self.treat_prob < 1:
            raise ValueError("treat_prob must lie in (0, 1)")
        if self.admin_cutoff is not None and not self.admin_cutoff > 0:
            raise ValueError("admin_cutoff must be positive")

    @property
    def feature_names(self) -> List[str]:
        return [m.name for m in self.moderators] + [f"x{j}" for j in range(self.p)]

    def subgroup(self, name: str) -> Subgroup:
        for s in self.subgroups:
            if s.name == name:
                return s
        raise KeyError(f"unknown subgroup {name!r}")

    def replace(self, **changes) -> "ScenarioSpec":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(changes)
        return ScenarioSpec(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        d["subgroups"] = tuple(
            Subgroup(s["name"], float(s["hazard_t0"]), float(s["hazard_t1"]),
                     tuple(tuple(c) for c in s.get("rule", ())))
            for s in d["subgroups"]
        )
        d["moderators"] = tuple(Moderator(**m) for m in d.get("moderators", ()))
        return cls(**d)


def exp_rmst(hazard: float, horizon: float) -> float:
    return (1.0 - math.exp(-hazard * horizon)) / hazard


@dataclass
class SubgroupTruth:
    name: str
    hazard_t0: float
    hazard_t1: float
    fraction: float  # population share implied by the moderator distribution

    def survival(self, arm: int, t):
        lam = self.hazard_t1 if arm == 1 else self.hazard_t0
        return np.exp(-lam * np.asarray(t, dtype=float))

    def median(self, arm: int) -> float:
        return math.log(2) / (self.hazard_t1 if arm == 1 else self.hazard_t0)

    @property
    def median_difference(self) -> float:
        return self.median(1) - self.median(0)

    def rmst(self, arm: int, horizon: float) -> float:
        return exp_rmst(self.hazard_t1 if arm == 1 else self.hazard_t0, horizon)

    def rmst_difference(self, horizon: float) -> float:
        return self.rmst(1, horizon) - self.rmst(0, horizon)


@dataclass
class GroundTruth:
    subgroups: Dict[str, SubgroupTruth]
    horizon: float
    membership: Dict[int, str] = field(default_factory=dict)  # record id -> subgroup

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "subgroups": {
                name: {
                    "hazard_t0": s.hazard_t0,
                    "hazard_t1": s.hazard_t1,
                    "fraction": s.fraction,
                    "median_t0": s.median(0),
                    "median_t1": s.median(1),
                    "median_difference": s.median_difference,
                    "rmst_t0": s.rmst(0, self.horizon),
                    "rmst_t1": s.rmst(1, self.horizon),
                    "rmst_difference": s.rmst_difference(self.horizon),
                }
                for name, s in self.subgroups.items()
            },
            "membership": {str(k): v for k, v in self.membership.items()},
        }


@dataclass
class Cohort:
    records: List[SurvivalRecord]
    truth: GroundTruth
    feature_names: List[str]


def _draw_moderators(spec: ScenarioSpec, rng, size) -> np.ndarray:
    M = np.empty((size, len(spec.moderators)))
    for j, m in enumerate(spec.moderators):
        if m.kind == "binary":
            M[:, j] = rng.integers(0, 2, size=size).astype(float)
        else:
            M[:, j] = rng.uniform(0.0, 1.0, size=size)
    return M


def _assign_subgroups(spec: ScenarioSpec, M: np.ndarray) -> np.ndarray:
    index = {m.name: j for j, m in enumerate(spec.moderators)}
    hits = np.vstack([s.matches(M, index) for s in spec.subgroups])
    counts = hits.sum(axis=0)
    if np.any(counts != 1):
        bad = int(np.flatnonzero(counts != 1)[0])
        raise ValueError(
            f"subgroup rules do not partition the moderator space "
            f"(moderators {M[bad].tolist()} match {int(counts[bad])} subgroups)"
        )
    return np.argmax(hits, axis=0)


def _subgroup_fractions(spec: ScenarioSpec) -> np.ndarray:
    """Population shares of each subgroup, by a fixed large Monte Carlo draw."""
    if not spec.moderators:
        return np.ones(len(spec.subgroups))
    M = _draw_moderators(spec, np.random.default_rng(12345), 200_000)
    labels = _assign_subgroups(spec, M)
    return np.bincount(labels, minlength=len(spec.subgroups)) / labels.size


def default_horizon(spec: ScenarioSpec) -> float:
    if spec.admin_cutoff is not None:
        return float(spec.admin_cutoff)
    slowest = min(min(s.hazard_t0, s.hazard_t1) for s in spec.subgroups)
    return math.log(100.0) / slowest


def generate(spec: ScenarioSpec, horizon: Optional[float] = None) -> Cohort:
    """Draw a cohort; identical ``spec`` (seed included) gives identical records."""
    _assign_subgroups(spec, _draw_moderators(spec, np.random.default_rng(0), 4096))
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    M = _draw_moderators(spec, rng, n)
    noise = rng.standard_normal((n, spec.p))
    arm = (rng.uniform(size=n) < spec.treat_prob).astype(int)
    labels = _assign_subgroups(spec, M)
    hazards = np.array([[s.hazard_t0, s.hazard_t1] for s in spec.subgroups])[labels, arm]
    event_time = rng.exponential(1.0, size=n) / hazards
    if spec.censoring_hazard > 0:
        censor_time = rng.exponential(1.0 / spec.censoring_hazard, size=n)
    else:
        censor_time = np.full(n, np.inf)
    if spec.admin_cutoff is not None:
        censor_time = np.minimum(censor_time, spec.admin_cutoff)
    observed = np.minimum(event_time, censor_time)
    event = (event_time <= censor_time).astype(int)

    X = np.hstack([M, noise])
    records = [
        SurvivalRecord(i, float(observed[i]), int(event[i]), int(arm[i]), tuple(X[i].tolist()))
        for i in range(n)
    ]
    fractions = _subgroup_fractions(spec)
    truth = GroundTruth(
        subgroups={
            s.name: SubgroupTruth(s.name, s.hazard_t0, s.hazard_t1, float(fractions[k]))
            for k, s in enumerate(spec.subgroups)
        },
        horizon=float(horizon) if horizon is not None else default_horizon(spec),
        membership={i: spec.subgroups[labels[i]].name for i in range(n)},
    )
    return Cohort(records, truth, spec.feature_names)


def true_differential_rmst(spec: ScenarioSpec, subgroup: str, horizon: float) -> float:
    """Closed-form RMST(arm 1) - RMST(arm 0) for one subgroup."""
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    s = spec.subgroup(subgroup)
    return exp_rmst(s.hazard_t1, horizon) - exp_rmst(s.hazard_t0, horizon)


def generate_planted_effect(
    n: int = 400,
    tau: float = 10.0,
    sigma: float = 1.0,
    p_noise: int = 4,
    base: float = 50.0,
    seed: int = 0,
) -> Cohort:
    """Uncensored outcome ``base + tau*(2*m - 1)*T + noise`` with binary moderator ``m``.

    Treatment is randomised 50/50 and the moderator is balanced, so the two
    moderator halves carry effects ``+tau`` and ``-tau``.
    """
    rng = np.random.default_rng(seed)
    m = rng.permutation(np.arange(n) % 2).astype(float)
    arm = rng.integers(0, 2, size=n)
    noise = rng.standard_normal((n, p_noise))
    y = base + tau * (2 * m - 1) * arm + sigma * rng.standard_normal(n)
    if np.any(y < 0):
        raise ValueError("planted outcome went negative; raise base")
    X = np.column_stack([m, noise])
    records = [
        SurvivalRecord(i, float(y[i]), 1, int(arm[i]), tuple(X[i].tolist())) for i in range(n)
    ]
    names = ["m"] + [f"x{j}" for j in range(p_noise)]
    truth = GroundTruth(subgroups={}, horizon=float(base), membership={i: f"m={int(m[i])}" for i in range(n)})
    return Cohort(records, truth, names)


SHAPED_N = 1806
SHAPED_P = 110
SHAPED_TREAT_PROB = 520 / 1806
SHAPED_MEDIAN_T0 = 34.0
SHAPED_MEDIAN_T1 = 43.0


def _scenarios() -> Dict[str, ScenarioSpec]:
    ln2 = math.log(2)
    return {
        # 1806 patients, 110 covariates, 520 treated, arm medians 34 and 43 days
        "paper_shape": ScenarioSpec(
            n=SHAPED_N,
            p=SHAPED_P,
            subgroups=(Subgroup("all", ln2 / SHAPED_MEDIAN_T0, ln2 / SHAPED_MEDIAN_T1),),
            censoring_hazard=0.002,
            treat_prob=SHAPED_TREAT_PROB,
            admin_cutoff=365.0,
        ),
        # one subgroup with its hazard halved under arm 1, one unaffected
        "paper_planted": ScenarioSpec(
            n=2000,
            p=10,
            moderators=(Moderator("m0", "binary"),),
            subgroups=(
                Subgroup("affected", 0.02, 0.01, (("m0", "==", 1.0),)),
                Subgroup("null", 0.02, 0.02, (("m0", "==", 0.0),)),
            ),
            censoring_hazard=0.002,
            treat_prob=SHAPED_TREAT_PROB,
            admin_cutoff=365.0,
        ),
        # no heterogeneity, no arm difference, mean survival 50 days
        "null": ScenarioSpec(
            n=2000,
            p=10,
            moderators=(Moderator("m0", "binary"),),
            subgroups=(
                Subgroup("a", 0.02, 0.02, (("m0", "==", 1.0),)),
                Subgroup("b", 0.02, 0.02, (("m0", "==", 0.0),)),
            ),
            censoring_hazard=0.002,
            treat_prob=0.5,
            admin_cutoff=365.0,
        ),
        # prognostic binary covariate with hazard ratio 4, no treatment effect
        "two_group_hr4": ScenarioSpec(
            n=1000,
            p=5,
            moderators=(Moderator("g", "binary"),),
            subgroups=(
                Subgroup("high", 0.04, 0.04, (("g", "==", 1.0),)),
                Subgroup("low", 0.01, 0.01, (("g", "==", 0.0),)),
            ),
            censoring_hazard=0.002,
            treat_prob=0.5,
        ),
        "pure_noise": ScenarioSpec(
            n=1000,
            p=5,
            subgroups=(Subgroup("all", 0.02, 0.02),),
            censoring_hazard=0.002,
            treat_prob=0.5,
        ),
    }


SCENARIOS = _scenarios()


def get_scenario(name: str, seed: Optional[int] = None, **changes) -> ScenarioSpec:
    if name not in SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; known: {sorted(SCENARIOS)}")
    spec = SCENARIOS[name]
    if seed is not None:
        changes["seed"] = seed
    return spec.replace(**changes) if changes else spec


def load_scenario(path) -> ScenarioSpec:
    return ScenarioSpec.from_dict(json.loads(Path(path).read_text()))
