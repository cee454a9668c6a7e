import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stratlearn import DataError, Dataset, DegenerateStrataError, merge_small_strata, strata_report, stratify
from stratlearn.strata import assign_strata, quantile_boundaries, report_to_csv


def chunk_oracle(scores, k):
    """Sort, cut into k chunks of ceil-sized prefixes; highest chunk is stratum 1."""
    n = len(scores)
    order = np.argsort(scores, kind="stable")
    out = np.empty(n, int)
    for j in range(1, k + 1):
        lo, hi = -(-(j - 1) * n // k), -(-j * n // k)
        out[order[lo:hi]] = k - j + 1
    return out


@settings(max_examples=60, deadline=None)
@given(st.integers(5, 400), st.integers(1, 8), st.integers(0, 10_000))
def test_stratification_matches_sort_and_chunk(n, k, seed):
    rng = np.random.default_rng(seed)
    scores = rng.uniform(0.001, 0.999, n)
    if n < k:
        return
    a = stratify(scores, rng.integers(0, 2, n), k)
    assert np.array_equal(a.stratum_of, chunk_oracle(scores, k))


def test_boundaries_are_type1_quantiles():
    scores = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7])
    assert np.allclose(quantile_boundaries(scores, 3), [0.3, 0.5])
    # a score equal to a boundary falls in the lower-score stratum
    assert assign_strata(np.array([0.3, 0.31]), np.array([0.3, 0.5])).tolist() == [3, 2]


def test_stratum_one_holds_highest_scores():
    scores = np.linspace(0.05, 0.95, 10)
    a = stratify(scores, np.ones(10, int), 5)
    assert a.stratum_of[-1] == 1 and a.stratum_of[0] == 5


def test_k_equal_one_and_errors():
    a = stratify(np.array([0.2, 0.3]), np.array([1, 0]), 1)
    assert a.stratum_of.tolist() == [1, 1]
    with pytest.raises(DegenerateStrataError):
        stratify(np.full(10, 0.5), np.ones(10, int), 2)
    with pytest.raises(DataError):
        stratify(np.array([0.0, 0.5]), np.array([1, 0]), 2)
    with pytest.raises(DataError):
        stratify(np.array([0.5]), np.array([1]), 2)


def test_merge_extends_pools_toward_stratum_one(caplog):
    # strata 1..4 with source counts 50, 30, 5, 0
    stratum_of = np.repeat([1, 2, 3, 4], [60, 40, 30, 20])
    s = np.r_[np.ones(50), np.zeros(10), np.ones(30), np.zeros(10), np.ones(5), np.zeros(25), np.zeros(20)].astype(int)
    from stratlearn.strata import StrataAssignment

    a = StrataAssignment(4, np.array([0.2, 0.4, 0.6]), stratum_of)
    m = merge_small_strata(a, s, min_source=40)
    assert m.merge_map == {1: (1,), 2: (2, 1), 3: (3, 2, 1), 4: (4, 3, 2, 1)}
    assert np.array_equal(m.stratum_of, a.stratum_of)
    assert len(m.training_rows(3, s)) == 85
    assert merge_small_strata(a, s, min_source=35).merge_map[3] == (3, 2)
    with caplog.at_level(logging.WARNING):
        tight = merge_small_strata(a, s, min_source=85)
    assert tight.merge_map[4] == (4, 3, 2, 1)
    assert "stratum 1 trains on only 50" in caplog.text


def test_merge_fails_without_enough_source():
    from stratlearn.strata import StrataAssignment

    a = StrataAssignment(2, np.array([0.5]), np.array([1, 1, 2, 2]))
    with pytest.raises(DataError):
        merge_small_strata(a, np.array([1, 0, 0, 0]), min_source=40)


def test_report_counts_and_label_means():
    X = np.linspace(0, 1, 8)[:, None]
    s = np.array([1, 1, 0, 1, 0, 1, 1, 0])
    y = np.arange(8.0)
    d = Dataset(X, s, ("x",), y)
    a = stratify(np.linspace(0.1, 0.9, 8), s, 2)
    rep = strata_report(a, d)
    assert [r["n_source"] + r["n_target"] for r in rep] == [4, 4]
    assert rep[0]["source_y_mean"] == pytest.approx(np.mean([5, 6]))
    assert rep[1]["target_y_mean"] == pytest.approx(np.mean([2]))
    d2 = Dataset(X, s, ("x",), np.where(s == 1, y, np.nan))
    rep2 = strata_report(a, d2)
    assert rep2[0]["target_y_mean"] is None
    assert "NA" in report_to_csv(rep2)


@settings(max_examples=40, deadline=None)
@given(st.integers(20, 400), st.integers(1, 8), st.integers(0, 10_000))
def test_partition_orientation_and_merge_invariance(n, k, seed):
    rng = np.random.default_rng(seed)
    scores = rng.uniform(0.01, 0.99, n)
    s = rng.integers(0, 2, n)
    s[:2] = (0, 1)
    a = stratify(scores, s, k)
    sizes = [int(np.sum(a.stratum_of == j)) for j in range(1, k + 1)]
    assert sum(sizes) == n and min(sizes) > 0
    means = [scores[a.stratum_of == j].mean() for j in range(1, k + 1)]
    assert np.all(np.diff(means) < 0)
    if all(np.any(s[a.stratum_of == j] == 1) for j in range(1, k + 1)):
        merged = merge_small_strata(a, s, min_source=1)
        assert np.array_equal(merged.stratum_of, a.stratum_of)


def test_no_shift_source_fraction_is_even_across_strata():
    rng = np.random.default_rng(8)
    n = 20_000
    X = rng.normal(size=(n, 3))
    s = (rng.random(n) < 0.4).astype(int)
    scores = 1 / (1 + np.exp(-(X @ np.array([0.05, -0.03, 0.02]) - 0.4)))
    a = stratify(scores, s, 5)
    frac = s.mean()
    for j in range(1, 6):
        in_j = a.stratum_of == j
        se = np.sqrt(frac * (1 - frac) / in_j.sum())
        assert abs(s[in_j].mean() - frac) < 3 * se
