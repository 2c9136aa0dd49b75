import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import strategies as st

sys.path.insert(0, str(Path(__file__).parent))

from causal_survival.causal_tree import leaf_assign  # noqa: E402
from causal_survival.survival_core import SurvivalRecord  # noqa: E402


def make_records(times, events, treatments=None, covariates=None):
    n = len(times)
    treatments = treatments if treatments is not None else [0] * n
    covariates = covariates if covariates is not None else [()] * n
    return [SurvivalRecord(i, t, e, a, x) for i, (t, e, a, x) in enumerate(zip(times, events, treatments, covariates))]


def random_cohort(rng, n, n_distinct=None, censor_prob=0.3):
    """Integer-ish times with forced ties and random censoring."""
    n_distinct = n_distinct or max(1, n // 2)
    times = rng.integers(0, n_distinct, size=n).astype(float) + 1.0
    events = (rng.uniform(size=n) > censor_prob).astype(int)
    return times.tolist(), events.tolist()


def majority_leaf(result, cohort, group):
    """The fitted leaf whose members are mostly from ``group``."""
    X = np.array([r.covariates for r in cohort.records])
    assign = np.array([leaf_assign(result.tree, x) for x in X])
    labels = np.array([cohort.truth.membership[r.id] for r in cohort.records])
    best, share = None, 0.0
    for lr in result.leaf_results:
        inside = labels[assign == lr.report.leaf_id]
        frac = np.mean(inside == group)
        if frac > 0.5 and frac > share:
            best, share = lr, frac
    return best


@st.composite
def cohorts(draw, min_size=1, max_size=30):
    n = draw(st.integers(min_size, max_size))
    times = draw(st.lists(st.integers(0, 12).map(float), min_size=n, max_size=n))
    events = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    return times, events


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion and assert it."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
