import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctbounds import Dataset, load_csv, make_folds, summary
from ctbounds.errors import (
    CTBWarning,
    MissingColumn,
    MissingCovariateCell,
    MissingOutcomeForResponder,
    NonBinaryFlag,
    PropensityOutOfRange,
    TooFewUnits,
)

SCHEMA = {"outcome": "y", "response": "s", "treatment": "d", "covariates": ["x1"]}


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_load_minimal(tmp_path):
    path = _write(tmp_path, "y,s,d,x1\n1.5,1,1,0.2\n,0,1,0.4\n2.0,1,0,0.6\n,0,0,0.8\n")
    data = load_csv(path, SCHEMA)
    assert len(data) == 4
    assert np.isnan(data.y[1]) and np.isnan(data.y[3])
    assert data[0].y == 1.5 and data[1].y is None
    assert data.covariate_names == ("x1",)


def test_responder_without_outcome(tmp_path):
    path = _write(tmp_path, "y,s,d,x1\n1.5,1,1,0.2\n,1,1,0.4\n2.0,1,0,0.6\n")
    with pytest.raises(MissingOutcomeForResponder):
        load_csv(path, SCHEMA)


def test_propensity_out_of_range(tmp_path):
    path = _write(tmp_path, "y,s,d,x1,p\n1.5,1,1,0.2,0.5\n2.0,1,0,0.6,1.0\n")
    with pytest.raises(PropensityOutOfRange):
        load_csv(path, {**SCHEMA, "propensity": "p"})


def test_other_validation_errors(tmp_path):
    with pytest.raises(MissingColumn):
        load_csv(_write(tmp_path, "y,s,d\n1,1,1\n2,1,0\n"), SCHEMA)
    with pytest.raises(NonBinaryFlag):
        load_csv(_write(tmp_path, "y,s,d,x1\n1,2,1,0\n2,1,0,0\n"), SCHEMA)
    with pytest.raises(MissingCovariateCell):
        load_csv(_write(tmp_path, "y,s,d,x1\n1,1,1,\n2,1,0,0\n"), SCHEMA)
    with pytest.raises(TooFewUnits):
        load_csv(_write(tmp_path, "y,s,d,x1\n1,1,1,0\n,0,0,0\n"), SCHEMA)


def test_stray_outcome_is_ignored_with_warning():
    with pytest.warns(CTBWarning):
        data = Dataset.from_arrays([1.0, 9.0, 2.0], [1, 0, 1], [1, 1, 0], [[0.], [1.], [2.]])
    assert np.isnan(data.y[1])


def test_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    n = 50
    s = rng.integers(0, 2, n)
    s[:2] = 1
    d = rng.integers(0, 2, n)
    d[0], d[1] = 0, 1
    y = np.where(s == 1, rng.normal(size=n) / 3, np.nan)
    data = Dataset.from_arrays(y, s, d, rng.random((n, 3)), rng.uniform(0.1, 0.9, n))
    data.to_csv(tmp_path / "a.csv")
    schema = {"outcome": "y", "response": "s", "treatment": "d",
              "covariates": ["x1", "x2", "x3"], "propensity": "p"}
    again = load_csv(tmp_path / "a.csv", schema)
    assert again == data
    again.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_dataset_is_immutable():
    data = Dataset.from_arrays([1.0, 2.0], [1, 1], [1, 0], [[0.], [1.]])
    with pytest.raises(ValueError):
        data.y[0] = 5.0


def test_fold_sizes():
    assert sorted(make_folds(10, 5, 1).sizes()) == [2, 2, 2, 2, 2]
    assert sorted(make_folds(11, 5, 1).sizes()) == [2, 2, 2, 2, 3]
    a, b = make_folds(37, 5, 42), make_folds(37, 5, 42)
    assert np.array_equal(a.assignment, b.assignment)
    with pytest.raises(TooFewUnits):
        make_folds(9, 5, 0)


@given(n=st.integers(4, 300), k=st.integers(2, 8), seed=st.integers(0, 2 ** 32))
@settings(max_examples=60, deadline=None)
def test_folds_partition(n, k, seed):
    if n < 2 * k:
        return
    plan = make_folds(n, k, seed)
    tests = np.concatenate([plan.test_indices(f) for f in range(1, k + 1)])
    assert np.array_equal(np.sort(tests), np.arange(n))
    sizes = plan.sizes()
    assert sizes.max() - sizes.min() <= 1
    for fold, train, test in plan.splits():
        assert len(np.intersect1d(train, test)) == 0
        assert len(train) + len(test) == n


def _rates(r0, r1, n=2000):
    half = n // 2
    d = np.r_[np.zeros(half), np.ones(half)]
    s = np.r_[np.arange(half) < round(r0 * half), np.arange(half) < round(r1 * half)]
    y = np.where(s, 1.0, np.nan)
    return Dataset.from_arrays(y, s.astype(int), d, np.zeros((n, 1)))


def test_summary_examples():
    sm = summary(_rates(0.395, 0.452))
    assert round(sm.q, 4) == 0.8739
    assert not sm.monotonicity_suspect
    assert summary(_rates(1.0, 1.0)).q == 1.0
    sm = summary(_rates(0.5, 0.25))
    assert sm.q == pytest.approx(2.0)
    assert sm.monotonicity_suspect


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=4, max_size=200))
@settings(max_examples=80, deadline=None)
def test_summary_q_formula(rows):
    rows = [(1, 1), (1, 0)] + rows
    s = np.array([r[0] for r in rows], dtype=float)
    d = np.array([r[1] for r in rows], dtype=float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        data = Dataset.from_arrays(np.where(s == 1, 0.0, np.nan), s, d, np.zeros((len(s), 1)))
    expected = (np.sum(s * (1 - d)) / np.sum(1 - d)) / (np.sum(s * d) / np.sum(d))
    assert summary(data).q == pytest.approx(expected, rel=1e-15, abs=0)
