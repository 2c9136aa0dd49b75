"""Right-censored survival primitives.

Kaplan-Meier curves, medians, the two-sample log-rank statistic, step-curve
arithmetic, restricted mean survival time and Harrell's concordance index.
Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Optional, Sequence

import numpy as np


class SchemaError(ValueError):
    """A record or curve violates its structural invariants."""


@dataclass(frozen=True)
class SurvivalRecord:
    """One patient: observed time, event flag, arm and covariates."""

    id: Hashable
    time: float
    event: int
    treatment: int
    covariates: tuple = field(default_factory=tuple)

    def __post_init__(self):
        t = float(self.time)
        if not math.isfinite(t) or t < 0:
            raise SchemaError(f"record {self.id!r}: time must be a finite value >= 0, got {self.time!r}")
        if self.event not in (0, 1):
            raise SchemaError(f"record {self.id!r}: event must be 0 or 1, got {self.event!r}")
        if self.treatment not in (0, 1):
            raise SchemaError(f"record {self.id!r}: treatment must be 0 or 1, got {self.treatment!r}")
        object.__setattr__(self, "time", t)
        object.__setattr__(self, "event", int(self.event))
        object.__setattr__(self, "treatment", int(self.treatment))
        object.__setattr__(self, "covariates", tuple(float(x) for x in self.covariates))


def validate_records(records: Sequence[SurvivalRecord]) -> int:
    """Check that all records share one covariate length; return it."""
    if not records:
        raise SchemaError("empty cohort")
    p = len(records[0].covariates)
    for r in records:
        if len(r.covariates) != p:
            raise SchemaError(
                f"record {r.id!r}: expected {p} covariates, got {len(r.covariates)}"
            )
    return p


def records_to_arrays(records: Sequence[SurvivalRecord]):
    """Return ``(time, event, treatment, X)`` numpy arrays for a cohort."""
    p = validate_records(records)
    time = np.fromiter((r.time for r in records), dtype=float, count=len(records))
    event = np.fromiter((r.event for r in records), dtype=np.int64, count=len(records))
    treatment = np.fromiter((r.treatment for r in records), dtype=np.int64, count=len(records))
    X = np.array([r.covariates for r in records], dtype=float).reshape(len(records), p)
    return time, event, treatment, X


@dataclass(frozen=True, eq=False)
class SurvivalCurve:
    """Right-continuous step function ``S(t)``; ``S(t) = 1`` before ``times[0]``."""

    times: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        probs = np.asarray(self.probs, dtype=float).reshape(-1)
        if times.shape != probs.shape:
            raise SchemaError("curve times and probs differ in length")
        if times.size:
            if not np.all(np.isfinite(times)) or times[0] < 0:
                raise SchemaError("curve times must be finite and nonnegative")
            if np.any(np.diff(times) <= 0):
                raise SchemaError("curve times must be strictly increasing")
            if np.any(probs < 0) or np.any(probs > 1) or np.any(np.isnan(probs)):
                raise SchemaError("curve probabilities must lie in [0, 1]")
            if np.any(np.diff(probs) > 0):
                raise SchemaError("curve probabilities must be nonincreasing")
        times.flags.writeable = False
        probs.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "probs", probs)

    def __call__(self, t):
        """Evaluate the step function at scalar or array ``t``."""
        t_arr = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t_arr, side="right") - 1
        padded = np.concatenate(([1.0], self.probs))
        out = padded[idx + 1]
        return float(out) if out.ndim == 0 else out

    def __len__(self):
        return self.times.size

    def __eq__(self, other):
        if not isinstance(other, SurvivalCurve):
            return NotImplemented
        return np.array_equal(self.times, other.times) and np.array_equal(self.probs, other.probs)

    def to_dict(self):
        return {"times": self.times.tolist(), "probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["times"], dtype=float), np.array(d["probs"], dtype=float))


@dataclass(frozen=True, eq=False)
class DifferenceCurve:
    """Pointwise ``S1(t) - S0(t)`` on the union of the two event grids."""

    times: np.ndarray
    deltas: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        deltas = np.asarray(self.deltas, dtype=float).reshape(-1)
        if times.shape != deltas.shape:
            raise SchemaError("difference times and deltas differ in length")
        if np.any(np.abs(deltas) > 1):
            raise SchemaError("differences must lie in [-1, 1]")
        times.flags.writeable = False
        deltas.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "deltas", deltas)

    def __eq__(self, other):
        if not isinstance(other, DifferenceCurve):
            return NotImplemented
        return np.array_equal(self.times, other.times) and np.array_equal(self.deltas, other.deltas)


@dataclass(frozen=True)
class LogRankResult:
    z: float
    chi_sq: float
    observed_a: float
    expected_a: float
    variance: float
    degenerate: bool = False


def km_from_arrays(time, event) -> SurvivalCurve:
    """Product-limit estimate from raw arrays.

    At tied times deaths are processed before censorings: everyone with
    ``time >= t`` is at risk for events at ``t``.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event)
    if time.size == 0:
        raise SchemaError("empty cohort")
    if np.any(time < 0):
        raise SchemaError("negative time")
    uniq, inverse, counts = np.unique(time, return_inverse=True, return_counts=True)
    deaths = np.bincount(inverse, weights=event.astype(float), minlength=uniq.size)
    at_risk = time.size - np.concatenate(([0], np.cumsum(counts)[:-1]))
    has_event = deaths > 0
    d = deaths[has_event]
    n = at_risk[has_event]
    probs = np.cumprod(1.0 - d / n)
    return SurvivalCurve(uniq[has_event], probs)


def km_estimate(records: Sequence[SurvivalRecord]) -> SurvivalCurve:
    """Kaplan-Meier curve of a cohort, on its distinct event times."""
    if len(records) == 0:
        raise SchemaError("empty cohort")
    time = np.fromiter((r.time for r in records), dtype=float, count=len(records))
    event = np.fromiter((r.event for r in records), dtype=float, count=len(records))
    return km_from_arrays(time, event)


def median_survival(curve: SurvivalCurve) -> Optional[float]:
    """First grid time with ``S <= 0.5``; ``None`` if never reached."""
    hit = np.flatnonzero(curve.probs <= 0.5)
    if hit.size == 0:
        return None
    return float(curve.times[hit[0]])


def logrank_arrays(time, event, in_a) -> LogRankResult:
    time = np.asarray(time, dtype=float)
    event = np.asarray(event).astype(bool)
    in_a = np.asarray(in_a).astype(bool)
    if not in_a.any() or in_a.all():
        raise ValueError("log-rank needs two nonempty groups")
    if not event.any():
        raise ValueError("log-rank needs at least one event")
    order = np.argsort(time, kind="stable")
    t = time[order]
    e = event[order]
    a = in_a[order]
    uniq = np.unique(t[e])
    lo = np.searchsorted(t, uniq, side="left")
    hi = np.searchsorted(t, uniq, side="right")
    cum_a = np.concatenate(([0], np.cumsum(a)))
    cum_e = np.concatenate(([0], np.cumsum(e)))
    cum_ae = np.concatenate(([0], np.cumsum(e & a)))
    n = t.size - lo
    n_a = cum_a[-1] - cum_a[lo]
    d = cum_e[hi] - cum_e[lo]
    d_a = cum_ae[hi] - cum_ae[lo]
    return _logrank_from_tables(n, n_a, d, d_a)


def _logrank_from_tables(n, n_a, d, d_a) -> LogRankResult:
    # written symmetrically in the two groups so swapping them negates z exactly
    n = n.astype(float)
    n_a = n_a.astype(float)
    d = d.astype(float)
    d_a = d_a.astype(float)
    n_b = n - n_a
    d_b = d - d_a
    expected = float(np.sum(d * (n_a / n)))
    observed = float(np.sum(d_a))
    excess = (d_a * n_b - d_b * n_a) / n
    denom = np.where(n > 1, n * n * (n - 1), 1.0)
    var_terms = np.where(n > 1, d * (n_a * n_b) * (n - d) / denom, 0.0)
    variance = float(np.sum(var_terms))
    if variance <= 0:
        return LogRankResult(0.0, 0.0, observed, expected, 0.0, degenerate=True)
    diff = float(np.sum(excess))
    return LogRankResult(
        z=diff / math.sqrt(variance),
        chi_sq=diff * diff / variance,
        observed_a=observed,
        expected_a=expected,
        variance=variance,
    )


def logrank(group_a: Sequence[SurvivalRecord], group_b: Sequence[SurvivalRecord]) -> LogRankResult:
    """Two-sample log-rank test; ``z > 0`` means group A has excess events.

    Zero total variance gives a degenerate result with ``z = chi_sq = 0``.
    """
    if len(group_a) == 0 or len(group_b) == 0:
        raise ValueError("log-rank needs two nonempty groups")
    recs = list(group_a) + list(group_b)
    time = [r.time for r in recs]
    event = [r.event for r in recs]
    in_a = np.zeros(len(recs), dtype=bool)
    in_a[: len(group_a)] = True
    return logrank_arrays(time, event, in_a)


def curve_diff(c1: SurvivalCurve, c0: SurvivalCurve) -> DifferenceCurve:
    """``c1 - c0`` evaluated on the union of both grids."""
    grid = np.union1d(c1.times, c0.times)
    return DifferenceCurve(grid, c1(grid) - c0(grid))


def rmst(curve: SurvivalCurve, horizon: float) -> float:
    """Exact area under the step curve on ``[0, horizon]``."""
    if not horizon > 0:
        raise ValueError(f"horizon must be positive, got {horizon!r}")
    inside = curve.times < horizon
    starts = np.concatenate(([0.0], curve.times[inside]))
    values = np.concatenate(([1.0], curve.probs[inside]))
    ends = np.concatenate((starts[1:], [horizon]))
    return float(np.sum(values * (ends - starts)))


def rmst_diff(c1: SurvivalCurve, c0: SurvivalCurve, horizon: float) -> float:
    """Area between two survival curves up to ``horizon`` (``c1`` minus ``c0``)."""
    return rmst(c1, horizon) - rmst(c0, horizon)


def concordance_arrays(risk, time, event, chunk: int = 2048) -> float:
    risk = np.asarray(risk, dtype=float)
    time = np.asarray(time, dtype=float)
    event = np.asarray(event).astype(bool)
    if not (risk.shape == time.shape == event.shape):
        raise ValueError("risk scores and records differ in length")
    num = 0.0
    den = 0
    # rows i are the shorter survivor of each pair
    for start in range(0, time.size, chunk):
        sl = slice(start, start + chunk)
        ti, ri, ei = time[sl, None], risk[sl, None], event[sl, None]
        comparable = ei & (ti < time[None, :])
        den += int(comparable.sum())
        num += float(np.sum(comparable & (ri > risk[None, :])))
        num += 0.5 * float(np.sum(comparable & (ri == risk[None, :])))
    if den == 0:
        raise ValueError("C-index undefined: no comparable pairs")
    return num / den


def concordance_index(risk_scores: Sequence[float], records: Sequence[SurvivalRecord]) -> float:
    """Harrell's C: higher risk should go with shorter survival."""
    if len(risk_scores) != len(records):
        raise ValueError("risk scores and records differ in length")
    time = [r.time for r in records]
    event = [r.event for r in records]
    return concordance_arrays(risk_scores, time, event)
