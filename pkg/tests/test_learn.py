import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from stratlearn import DataError, Dataset, stratify
from stratlearn.learn import (
    KNNRegressor,
    LeastSquares,
    LearnerSpec,
    LogisticClassifier,
    biased_fit_predict,
    cross_validate,
    draw_resample,
    empirical_risk,
    fold_ids,
    grid,
    importance_sampled_fit,
    stratlearn_fit_predict,
    task_seed,
    weighted_fit_predict,
)
from stratlearn.strata import StrataAssignment


def test_least_squares_recovers_exact_line():
    X = np.arange(10.0)[:, None]
    m = LeastSquares().fit(X, 2 * X[:, 0] + 1)
    assert m.intercept_ == pytest.approx(1.0, abs=1e-8)
    assert m.coef_[0] == pytest.approx(2.0, abs=1e-8)


def test_weighted_least_squares_matches_row_duplication():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(8, 2))
    y = rng.normal(size=8)
    counts = np.array([1, 2, 3, 1, 1, 2, 1, 4])
    a = LeastSquares().fit(X, y, counts.astype(float))
    b = LeastSquares().fit(np.repeat(X, counts, axis=0), np.repeat(y, counts))
    assert np.allclose(a.coef_, b.coef_, atol=1e-9) and a.intercept_ == pytest.approx(b.intercept_, abs=1e-9)


def test_zero_weight_rows_are_excluded():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(20, 2))
    y = rng.normal(size=20)
    w = np.ones(20)
    w[:5] = 0.0
    for spec in (LearnerSpec("least_squares"), LearnerSpec("knn_regressor", {"n_neighbors": 3})):
        full = spec.build().fit(X, y, w)
        sub = spec.build().fit(X[5:], y[5:])
        q = rng.normal(size=(6, 2))
        assert np.allclose(full.predict(q), sub.predict(q), atol=1e-12)


def _logistic_objective(beta, Z, y, w, lam):
    eta = Z @ beta
    return -np.sum(w * (y * eta - np.logaddexp(0, eta))) + 0.5 * lam * np.sum(beta[1:] ** 2)


def test_weighted_logistic_matches_generic_optimizer():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(150, 2))
    y = (rng.random(150) < 1 / (1 + np.exp(-X[:, 0]))).astype(float)
    w = rng.uniform(0.1, 3, 150)
    m = LogisticClassifier(ridge_lambda=0.3).fit(X, y, w)
    wn = w / w.mean()
    Z = np.column_stack([np.ones(150), X])
    ref = minimize(_logistic_objective, np.zeros(3), args=(Z, y, wn, 0.3), method="BFGS", options={"gtol": 1e-10}).x
    assert m.intercept_ == pytest.approx(ref[0], abs=1e-6)
    assert np.allclose(m.coef_, ref[1:], atol=1e-6)


def test_single_class_logistic_predicts_constant():
    with pytest.warns(RuntimeWarning, match="single-class"):
        m = LogisticClassifier().fit(np.zeros((4, 1)), np.ones(4))
    assert np.all(m.predict(np.ones((3, 1))) == 1.0)


def test_knn_is_a_weighted_vote():
    X = np.array([[0.0], [1.0], [2.0], [10.0]])
    y = np.array([0.0, 1.0, 2.0, 5.0])
    m = KNNRegressor(2).fit(X, y, np.array([1.0, 3.0, 1.0, 1.0]))
    # neighbors of 0.4 are rows 0 and 1 with weights 1 and 3
    assert m.predict(np.array([[0.4]]))[0] == pytest.approx(0.75)


def test_losses_on_hand_cases():
    assert empirical_risk(np.array([1.0, 0.0]), np.array([1.0, 0.0]), "logloss").value == pytest.approx(0.0, abs=1e-11)
    assert empirical_risk(np.full(3, 0.5), np.array([1.0, 0.0, 1.0]), "logloss").value == pytest.approx(math.log(2))
    r = empirical_risk(np.zeros(3), np.array([1.0, 2.0, 3.0]), "squared", w=np.array([2.0, 1.0, 1.0]))
    assert r.value == pytest.approx((2 * 1 + 4 + 9) / 3)
    assert r.weighting == "importance"
    assert empirical_risk(np.array([0.0]), np.array([1.0]), "logloss").clipped


def test_grid_order_and_one_point_grid():
    specs = grid("knn_regressor", n_neighbors=[1, 5, 9])
    assert [s.params["n_neighbors"] for s in specs] == [1, 5, 9]
    two = grid("logistic_classifier", ridge_lambda=[0.1, 1.0], max_iter=[10, 20])
    assert [(s.params["ridge_lambda"], s.params["max_iter"]) for s in two] == [(0.1, 10), (0.1, 20), (1.0, 10), (1.0, 20)]
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 1))
    cv = cross_validate(specs[:1], X, X[:, 0], folds=3)
    assert cv.best_index == 0 and len(cv.table) == 1
    with pytest.raises(DataError):
        LearnerSpec("forest")


def test_two_fold_cv_matches_manual_computation():
    X = np.array([[0.0], [1.0], [2.0], [4.0]])
    y = np.array([0.0, 1.0, 3.0, 4.0])
    specs = grid("knn_regressor", n_neighbors=[1, 2])
    ids = fold_ids(4, 2, np.random.default_rng(7))
    manual = []
    for k in (1, 2):
        fr = []
        for f in range(2):
            tr, ho = ids != f, ids == f
            Xt, yt = X[tr], y[tr]
            pred = [np.mean(yt[np.argsort(np.abs(Xt[:, 0] - x))[:k]]) for x in X[ho, 0]]
            fr.append(np.mean((np.array(pred) - y[ho]) ** 2))
        manual.append(np.mean(fr))
    cv = cross_validate(specs, X, y, folds=2, seed=7)
    assert np.allclose(cv.risks(), manual, atol=1e-12)
    assert cv.best_index == int(np.argmin(manual))


def test_ties_go_to_the_first_grid_entry():
    X = np.arange(12.0)[:, None]
    y = np.ones(12)
    cv = cross_validate(grid("knn_regressor", n_neighbors=[3, 1, 2]), X, y, folds=3)
    assert cv.best_index == 0


def _reg_data(n=120, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    return X, X[:, 0] ** 2 + rng.normal(scale=0.3, size=n)


def test_iwcv_with_unit_weights_equals_ordinary_cv():
    X, y = _reg_data()
    specs = grid("knn_regressor", n_neighbors=[1, 3, 7, 15])
    plain = cross_validate(specs, X, y, folds=5, seed=3)
    weighted = cross_validate(specs, X, y, folds=5, seed=3, w=np.ones(len(y)))
    assert [r["fold_risks"] for r in plain.table] == [r["fold_risks"] for r in weighted.table]
    assert plain.best_index == weighted.best_index


def test_single_class_fold_is_reshuffled_or_rejected():
    X = np.arange(10.0)[:, None]
    y = np.r_[np.zeros(9), 1.0]
    with pytest.raises(DataError, match="single class"):
        cross_validate(grid("logistic_classifier", ridge_lambda=[0.1, 1.0]), X, y, folds=5)
    with pytest.warns(RuntimeWarning, match="skipped"):
        cv = cross_validate(grid("logistic_classifier", ridge_lambda=[0.1, 1.0]), X, np.ones(10), folds=5)
    assert cv.best_index == 0


def test_task_seeds_are_stable_and_distinct():
    assert task_seed(5, 1) == task_seed(5, 1)
    assert len({task_seed(5, j) for j in range(1, 50)}) == 49
    assert task_seed(5, 1) != task_seed(6, 1)


def test_resample_frequencies_match_probabilities():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    n = 100_000
    idx = draw_resample(p, n, np.random.default_rng(0))
    freq = np.bincount(idx, minlength=4) / n
    se = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(freq - p) < 3 * se)
    with pytest.raises(DataError):
        draw_resample(np.array([0.5, 0.6]), 3, np.random.default_rng(0))


def test_importance_sampled_fit_uses_the_drawn_rows():
    X, y = _reg_data(50)
    p = np.full(50, 1 / 50)
    m = importance_sampled_fit(LearnerSpec("least_squares"), X, y, p, seed=4)
    ref = LeastSquares().fit(X[m.resample_index_], y[m.resample_index_])
    assert np.array_equal(m.coef_, ref.coef_)
    one = np.zeros(50)
    one[3] = 1.0
    with pytest.warns(RuntimeWarning, match="single distinct row"):
        importance_sampled_fit(LearnerSpec("knn_regressor", {"n_neighbors": 1}), X, y, one, seed=1)


def _shifted_dataset(n=600, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    s = (rng.random(n) < 1 / (1 + np.exp(X[:, 0]))).astype(int)
    y = X[:, 0] ** 2 + 0.5 * X[:, 1] + rng.normal(scale=0.3, size=n)
    return Dataset(X, s, ("a", "b"), y), 1 / (1 + np.exp(X[:, 0]))


def test_one_stratum_bit_equals_biased_fit():
    d, _ = _shifted_dataset()
    specs = grid("knn_regressor", n_neighbors=[1, 5, 15])
    a = StrataAssignment(1, np.empty(0), np.ones(d.n, dtype=np.int64))
    strat = stratlearn_fit_predict(specs, d, a, folds=5, seed=11)
    base = biased_fit_predict(specs, d, folds=5, seed=11)
    assert np.array_equal(strat.prediction, base.prediction)
    assert np.array_equal(strat.target_index, base.target_index)
    assert strat.strata[0].cv.table == base.strata[0].cv.table


def test_stratlearn_predicts_each_target_row_once_with_its_own_stratum():
    d, e = _shifted_dataset()
    a = stratify(e, d.s, 5)
    res = stratlearn_fit_predict(grid("least_squares"), d, a, folds=5, seed=0)
    tgt = np.flatnonzero(d.s == 0)
    assert np.array_equal(res.target_index, tgt)
    assert np.array_equal(res.stratum, a.stratum_of[tgt])
    for sf in res.strata:
        rows = res.target_index[res.stratum == sf.stratum]
        src = a.training_rows(sf.stratum, d.s)
        ref = LeastSquares().fit(d.X[src], d.y[src])
        assert np.allclose(res.prediction[res.stratum == sf.stratum], ref.predict(d.X[rows]))


@pytest.mark.parametrize("mode", ["weighted_erm", "iwcv", "importance_sampling", "iwcv_plus_sampling"])
def test_weighted_modes_cover_the_target(mode):
    d, e = _shifted_dataset()
    src = d.s == 1
    w = (1 - e[src]) / e[src]
    res = weighted_fit_predict(grid("knn_regressor", n_neighbors=[3, 9]), d, w, mode, folds=4, seed=2)
    assert np.array_equal(res.target_index, np.flatnonzero(~src))
    assert np.all(np.isfinite(res.prediction))
    again = weighted_fit_predict(grid("knn_regressor", n_neighbors=[3, 9]), d, w, mode, folds=4, seed=2)
    assert np.array_equal(res.prediction, again.prediction)


def test_weighted_erm_fit_uses_the_weights():
    d, e = _shifted_dataset()
    src = d.s == 1
    w = (1 - e[src]) / e[src]
    res = weighted_fit_predict([LearnerSpec("least_squares")], d, w, "weighted_erm", folds=4)
    ref = LeastSquares().fit(d.X[src], d.y[src], w)
    assert np.allclose(res.prediction, ref.predict(d.X[~src]))
    with pytest.raises(DataError):
        weighted_fit_predict([LearnerSpec("least_squares")], d, w, "bagging")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0.01, 100.0))
def test_fits_are_invariant_to_weight_scale(seed, scale):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(25, 2))
    y = X[:, 0] - X[:, 1] + rng.normal(size=25)
    w = rng.uniform(0.1, 2.0, 25)
    a = LeastSquares().fit(X, y, w)
    b = LeastSquares().fit(X, y, w * scale)
    assert np.allclose(a.coef_, b.coef_, rtol=1e-9, atol=1e-9)
    yb = (y > 0).astype(float)
    if 0 < yb.sum() < 25:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            la = LogisticClassifier(ridge_lambda=0.1).fit(X, yb, w)
            lb = LogisticClassifier(ridge_lambda=0.1).fit(X, yb, w * scale)
        assert np.allclose(la.coef_, lb.coef_, rtol=1e-7, atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 10))
def test_zero_weight_exclusion_property(seed, n_zero):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(20, 2))
    y = rng.normal(size=20)
    w = rng.uniform(0.5, 2, 20)
    w[:n_zero] = 0
    a = LeastSquares().fit(X, y, w)
    b = LeastSquares().fit(X[n_zero:], y[n_zero:], w[n_zero:])
    assert np.allclose(a.coef_, b.coef_, atol=1e-9)


def test_empirical_risk_scales_with_the_weights():
    rng = np.random.default_rng(5)
    pred, y, w = rng.normal(size=12), rng.normal(size=12), rng.uniform(0.1, 2, 12)
    base = empirical_risk(pred, y, "squared", w).value
    assert empirical_risk(pred, y, "squared", 3.5 * w).value == pytest.approx(3.5 * base, rel=1e-12)
