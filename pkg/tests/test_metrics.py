import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stratlearn import DataError
from stratlearn.metrics import (
    DEFAULT_N_BOOT,
    EvalReport,
    auc,
    bootstrap,
    bootstrap_se,
    evaluate,
    logloss,
    mse,
    paired_bootstrap,
    roc_area,
    roc_csv,
    roc_curve,
)


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def threshold_roc(scores, labels):
    """ROC by sweeping every distinct threshold from high to low."""
    scores, labels = np.asarray(scores), np.asarray(labels)
    n1, n0 = labels.sum(), (1 - labels).sum()
    pts = [(0.0, 0.0)]
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        pts.append((float(np.sum(pred & (labels == 0)) / n0), float(np.sum(pred & (labels == 1)) / n1)))
    return pts


def test_auc_hand_cases():
    s = np.array([0.9, 0.8, 0.4, 0.2])
    assert auc(s, [1, 1, 0, 0]) == 1.0
    assert auc(s, [1, 0, 1, 0]) == 0.75
    assert auc(np.full(4, 0.3), [1, 0, 1, 0]) == 0.5
    with pytest.raises(DataError):
        auc(s, [1, 1, 1, 1])
    with pytest.raises(DataError):
        auc(s, [1, 2, 0, 0])


def test_auc_matches_pairwise_count_on_random_fixtures():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 40))
        y = rng.integers(0, 2, n)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        s = rng.integers(0, 6, n) / 5.0  # plenty of ties
        assert auc(s, y) == pairwise_auc(s, y)


def test_roc_hand_cases_and_threshold_oracle():
    assert roc_curve([0.9, 0.8, 0.4, 0.2], [1, 1, 0, 0]) == [(0.0, 0.0), (0.0, 0.5), (0.0, 1.0), (0.5, 1.0), (1.0, 1.0)]
    s = [0.7, 0.3, 0.7, 0.1, 0.5, 0.3]
    y = [1, 0, 0, 1, 1, 0]
    assert roc_curve(s, y) == threshold_roc(s, y)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.integers(0, 1)), min_size=2, max_size=40))
def test_roc_properties(rows):
    s = np.array([r[0] for r in rows], float)
    y = np.array([r[1] for r in rows], float)
    if y.min() == y.max():
        return
    pts = roc_curve(s, y)
    assert pts == threshold_roc(s, y)
    assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
    f, t = np.array(pts).T
    assert np.all(np.diff(f) >= 0) and np.all(np.diff(t) >= 0)
    assert roc_area(pts) == pytest.approx(auc(s, y), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_auc_transform_invariance_and_reversal(seed):
    rng = np.random.default_rng(seed)
    n = 30
    y = np.r_[0, 1, rng.integers(0, 2, n - 2)]
    s = rng.normal(size=n)  # ties have probability zero
    a = auc(s, y)
    assert auc(np.exp(3 * s) + 2, y) == a
    assert a + auc(-s, y) == pytest.approx(1.0, abs=1e-12)
    assert 0.0 <= a <= 1.0


def test_reversed_scores_fall_below_the_diagonal():
    s = np.array([0.9, 0.7, 0.6, 0.4, 0.2])
    y = np.array([1, 1, 0, 1, 0])
    pts = roc_curve(-s, y)
    assert all(t <= f for f, t in pts)
    assert roc_area(pts) == pytest.approx(1 - auc(s, y), abs=1e-12)


def test_mse_and_logloss():
    assert mse(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert mse(np.array([1.0, 2.0, 3.0]), np.array([2.0, 2.0, 1.0])) == pytest.approx(5 / 3)
    assert logloss(np.array([0.5, 0.5]), np.array([0, 1])) == pytest.approx(np.log(2))
    with pytest.raises(DataError):
        mse(np.zeros(2), np.zeros(3))


def reference_bootstrap_auc(scores, labels, n_boot, seed):
    """Independent re-implementation: per-replicate rng, redraw single-class resamples."""
    reps = []
    for b in range(n_boot):
        rng = np.random.default_rng([seed, b])
        for _ in range(11):
            idx = rng.integers(0, len(scores), size=len(scores))
            yb = labels[idx]
            if 0 < yb.sum() < len(yb):
                reps.append(pairwise_auc(scores[idx], yb))
                break
    reps = np.array(reps)
    return np.sqrt(np.sum((reps - reps.mean()) ** 2) / (len(reps) - 1))


def test_bootstrap_se_matches_reference_implementation():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, 50)
    s = y + rng.normal(size=50)
    assert bootstrap_se("auc", s, y, n_boot=100, seed=9) == pytest.approx(
        reference_bootstrap_auc(s, y, 100, 9), abs=1e-12
    )


def test_bootstrap_defaults_and_determinism():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 2, 60)
    s = rng.random(60)
    r = bootstrap("auc", s, y)
    assert DEFAULT_N_BOOT == 400 and r.n_boot == 400 and len(r.replicates) == 400
    assert bootstrap_se("auc", s, y, seed=3) == bootstrap_se("auc", s, y, seed=3)
    assert bootstrap_se("auc", s, y, seed=3) != bootstrap_se("auc", s, y, seed=4)
    with pytest.raises(DataError):
        bootstrap_se("auc", s, y, n_boot=1)


def test_perfect_separation_has_zero_se():
    y = np.r_[np.zeros(500), np.ones(500)]
    assert bootstrap_se("auc", y + 0.1, y, n_boot=50) == pytest.approx(0.0, abs=1e-15)


def test_rare_class_resamples_are_skipped_and_counted(caplog):
    # with two rows, half of all resamples lose a class; 11 misses in a row do occur
    y = np.array([1.0, 0.0])
    s = np.array([0.7, 0.2])
    r = bootstrap("auc", s, y, n_boot=8000)
    assert r.skipped > 0 and len(r.replicates) == 8000 - r.skipped
    assert "skipped" in caplog.text


def test_paired_bootstrap_of_identical_methods_is_zero():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 2, 80)
    s = rng.random(80)
    r = paired_bootstrap("auc", s, s, y, n_boot=40)
    assert np.all(r.replicates == 0) and r.se == 0.0


def test_paired_replicates_are_differences_on_shared_resamples():
    rng = np.random.default_rng(4)
    y = rng.normal(size=40)
    a, b = y + rng.normal(size=40), y + 2 * rng.normal(size=40)
    ra = bootstrap("mse", a, y, n_boot=30, seed=5).replicates
    rb = bootstrap("mse", b, y, n_boot=30, seed=5).replicates
    rd = paired_bootstrap("mse", a, b, y, n_boot=30, seed=5).replicates
    assert np.allclose(rd, ra - rb, atol=1e-12)


def test_evaluate_report_and_exports():
    y = np.array([1, 0, 1, 0, 1, 1, 0, 0])
    s = np.array([0.9, 0.1, 0.8, 0.4, 0.35, 0.7, 0.5, 0.2])
    rep = evaluate("auc", s, y, n_boot=20)
    assert rep.value == auc(s, y)
    d = json.loads(rep.to_json())
    assert d["n_boot"] == 20 and d["roc_points"][0] == [0.0, 0.0]
    assert roc_csv(rep.roc_points).startswith("fpr,tpr\n0.0,0.0\n")
    risk = evaluate("cde_target_risk", np.array([-1.0, -2.0, -3.0]), None, n_boot=10)
    assert risk.value == -2.0 and risk.roc_points is None
    with pytest.raises(DataError):
        EvalReport("accuracy", 0.5, 0.0, 10, 3)
    with pytest.raises(DataError):
        EvalReport("auc", 1.5, 0.0, 10, 3)
