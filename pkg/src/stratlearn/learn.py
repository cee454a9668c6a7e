"""Base learners, empirical risk, (importance-weighted) cross-validation and StratLearn.

Every learner takes optional per-row weights. Rows with zero weight are
dropped before fitting, and the remaining weights are rescaled to mean 1, so
fits are invariant to a common rescaling of the weights.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from stratlearn.errors import DataError
from stratlearn.propensity import logistic_irls
from stratlearn.strata import StrataAssignment
from stratlearn.tabular import Dataset

log = logging.getLogger(__name__)

LOGLOSS_EPS = 1e-12
KINDS = ("logistic_classifier", "least_squares", "knn_regressor")
MODES = ("weighted_erm", "iwcv", "importance_sampling", "iwcv_plus_sampling")


def task_seed(master: int, index: int) -> int:
    """Seed for sub-task ``index`` derived from ``master``; independent of execution order."""
    return int(np.random.SeedSequence([int(master) & (2**64 - 1), int(index)]).generate_state(1, np.uint64)[0])


def _prepare_weights(X: np.ndarray, y: np.ndarray, w: np.ndarray | None):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DataError(f"X {X.shape} and y {y.shape} do not match")
    if w is None:
        return X, y, np.ones(X.shape[0])
    w = np.asarray(w, dtype=float)
    if w.shape != y.shape:
        raise DataError("weights must have one entry per row")
    if np.any(~np.isfinite(w)) or np.any(w < 0):
        raise DataError("weights must be finite and nonnegative")
    keep = w > 0
    if not keep.any():
        raise DataError("all weights are zero")
    wk = w[keep]
    return X[keep], y[keep], wk / np.mean(wk)


class LogisticClassifier:
    kind = "logistic_classifier"

    def __init__(self, ridge_lambda: float = 1e-6, max_iter: int = 100, tol: float = 1e-8):
        self.ridge_lambda = ridge_lambda
        self.max_iter = max_iter
        self.tol = tol
        self.intercept_: float | None = None
        self.coef_: np.ndarray | None = None
        self.constant_: float | None = None

    def fit(self, X, y, w=None) -> LogisticClassifier:
        X, y, w = _prepare_weights(X, y, w)
        if not np.all((y == 0) | (y == 1)):
            raise DataError("logistic_classifier needs 0/1 labels")
        ybar = float(np.sum(w * y) / np.sum(w))
        if ybar in (0.0, 1.0):
            warnings.warn("single-class training data: fitting a constant predictor", RuntimeWarning, stacklevel=2)
            self.constant_, self.intercept_, self.coef_ = ybar, None, np.zeros(X.shape[1])
            return self
        res = logistic_irls(X, y, w, self.ridge_lambda, self.max_iter, self.tol)
        self.constant_ = None
        self.intercept_, self.coef_ = float(res.beta[0]), res.beta[1:]
        return self

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.constant_ is not None:
            return np.full(X.shape[0], self.constant_)
        return expit(self.intercept_ + X @ self.coef_)

    def describe(self) -> str:
        if self.constant_ is not None:
            return f"logistic_classifier constant={self.constant_!r}\n"
        coefs = " ".join(repr(float(c)) for c in self.coef_)
        return f"logistic_classifier ridge_lambda={self.ridge_lambda!r}\nintercept={self.intercept_!r}\ncoef={coefs}\n"


class LeastSquares:
    kind = "least_squares"

    def __init__(self, ridge_lambda: float = 1e-10):
        self.ridge_lambda = ridge_lambda
        self.intercept_: float | None = None
        self.coef_: np.ndarray | None = None

    def fit(self, X, y, w=None) -> LeastSquares:
        X, y, w = _prepare_weights(X, y, w)
        Z = np.column_stack([np.ones(X.shape[0]), X])
        pen = np.full(Z.shape[1], float(self.ridge_lambda))
        pen[0] = 0.0
        A = (Z * w[:, None]).T @ Z + np.diag(pen)
        rhs = Z.T @ (w * y)
        try:
            beta = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            warnings.warn("singular normal equations; using least-norm solution", RuntimeWarning, stacklevel=2)
            beta = np.linalg.lstsq(A, rhs, rcond=None)[0]
        self.intercept_, self.coef_ = float(beta[0]), beta[1:]
        return self

    def predict(self, X) -> np.ndarray:
        return self.intercept_ + np.asarray(X, dtype=float) @ self.coef_

    def describe(self) -> str:
        coefs = " ".join(repr(float(c)) for c in self.coef_)
        return f"least_squares ridge_lambda={self.ridge_lambda!r}\nintercept={self.intercept_!r}\ncoef={coefs}\n"


class KNNRegressor:
    """Weighted average of the responses of the ``n_neighbors`` nearest training rows.

    Training weights act as vote multipliers.
    """

    kind = "knn_regressor"

    def __init__(self, n_neighbors: int = 5):
        if n_neighbors < 1:
            raise DataError("n_neighbors must be >= 1")
        self.n_neighbors = int(n_neighbors)

    def fit(self, X, y, w=None) -> KNNRegressor:
        X, y, w = _prepare_weights(X, y, w)
        self.X_, self.y_, self.w_ = X, y, w
        self.tree_ = cKDTree(X)
        return self

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        k = min(self.n_neighbors, self.X_.shape[0])
        if k < self.n_neighbors:
            log.warning("knn_regressor: only %d training rows for n_neighbors=%d", k, self.n_neighbors)
        _, idx = self.tree_.query(X, k=k)
        idx = np.asarray(idx).reshape(X.shape[0], k)
        wv = self.w_[idx]
        return np.sum(wv * self.y_[idx], axis=1) / np.sum(wv, axis=1)

    def describe(self) -> str:
        return f"knn_regressor n_neighbors={self.n_neighbors} n_train={self.X_.shape[0]}\n"


_CLASSES = {c.kind: c for c in (LogisticClassifier, LeastSquares, KNNRegressor)}


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in _CLASSES:
            raise DataError(f"unknown learner kind {self.kind!r}; expected one of {KINDS}")

    def build(self):
        return _CLASSES[self.kind](**self.params)

    @property
    def loss_kind(self) -> str:
        return "logloss" if self.kind == "logistic_classifier" else "squared"

    def label(self) -> str:
        inner = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.kind}({inner})"


def grid(kind: str, **axes: Sequence) -> list[LearnerSpec]:
    """Cartesian grid of learner specs, in the order the axes are given."""
    specs = [{}]
    for name, values in axes.items():
        specs = [{**s, name: v} for s in specs for v in values]
    return [LearnerSpec(kind, s) for s in specs]


def fit(spec: LearnerSpec, X, y, w=None, seed: int = 0):
    """Fit a fresh learner; ``seed`` is accepted for interface symmetry (all learners are deterministic)."""
    return spec.build().fit(X, y, w)


@dataclass(frozen=True)
class RiskEstimate:
    value: float
    loss_kind: str
    weighting: str
    n: int
    clipped: bool = False


def pointwise_loss(pred: np.ndarray, y: np.ndarray, loss_kind: str) -> tuple[np.ndarray, bool]:
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(y, dtype=float)
    if pred.shape != y.shape:
        raise DataError(f"prediction shape {pred.shape} does not match labels {y.shape}")
    if loss_kind == "squared":
        return (pred - y) ** 2, False
    if loss_kind == "logloss":
        clipped = bool(np.any((pred < LOGLOSS_EPS) | (pred > 1 - LOGLOSS_EPS)))
        p = np.clip(pred, LOGLOSS_EPS, 1 - LOGLOSS_EPS)
        return -(y * np.log(p) + (1 - y) * np.log(1 - p)), clipped
    raise DataError(f"unknown loss {loss_kind!r}")


def empirical_risk(pred, y, loss_kind: str, w=None) -> RiskEstimate:
    """``(1/n) sum_i w_i loss(pred_i, y_i)``; unit weights when ``w`` is None."""
    losses, clipped = pointwise_loss(pred, y, loss_kind)
    if w is None:
        value = float(np.mean(losses))
    else:
        w = np.asarray(w, dtype=float)
        if w.shape != losses.shape:
            raise DataError("weights must have one entry per row")
        value = float(np.mean(w * losses))
    return RiskEstimate(value, loss_kind, "uniform" if w is None else "importance", losses.size, clipped)


@dataclass(frozen=True)
class CVResult:
    best: LearnerSpec
    best_index: int
    table: list[dict]
    folds: int

    def risks(self) -> np.ndarray:
        return np.array([r["risk"] for r in self.table])


def fold_ids(n: int, folds: int, rng: np.random.Generator) -> np.ndarray:
    ids = np.empty(n, dtype=np.int64)
    for f, part in enumerate(np.array_split(rng.permutation(n), folds)):
        ids[part] = f
    return ids


def _single_class_fold(y: np.ndarray, ids: np.ndarray, folds: int) -> bool:
    return any(np.unique(y[ids != f]).size < 2 for f in range(folds))


def cross_validate(
    specs: Sequence[LearnerSpec],
    X,
    y,
    folds: int = 10,
    loss_kind: str | None = None,
    w=None,
    seed: int = 0,
    train_weights=None,
    repeats: int = 1,
) -> CVResult:
    """Select among ``specs`` by mean held-out loss over seeded folds.

    ``w`` multiplies held-out losses (importance-weighted CV when given);
    ``train_weights`` is passed to the learners' fits. Ties go to the earliest
    spec, so grids should run from simplest to most complex.
    """
    specs = list(specs)
    if not specs:
        raise DataError("empty learner grid")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    loss_kind = loss_kind or specs[0].loss_kind
    if folds < 2:
        raise DataError("folds must be >= 2")
    if n < folds:
        raise DataError(f"{n} rows cannot be split into {folds} folds")
    w = None if w is None else np.asarray(w, dtype=float)
    tw = None if train_weights is None else np.asarray(train_weights, dtype=float)
    classify = any(s.kind == "logistic_classifier" for s in specs)
    rng = np.random.default_rng(seed)

    if classify and np.unique(y).size < 2:
        warnings.warn("single-class labels: cross-validation skipped, first grid entry used", RuntimeWarning, stacklevel=2)
        table = [{"spec": s.label(), "risk": float("nan"), "fold_risks": []} for s in specs]
        return CVResult(specs[0], 0, table, folds)

    fold_risks = np.zeros((len(specs), repeats * folds))
    for r in range(repeats):
        ids = fold_ids(n, folds, rng)
        if classify and _single_class_fold(y, ids, folds):
            ids = fold_ids(n, folds, rng)
            if _single_class_fold(y, ids, folds):
                raise DataError("a training fold has a single class after reshuffling")
        for f in range(folds):
            tr, ho = ids != f, ids == f
            for i, spec in enumerate(specs):
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    model = spec.build().fit(X[tr], y[tr], None if tw is None else tw[tr])
                risk = empirical_risk(model.predict(X[ho]), y[ho], loss_kind, None if w is None else w[ho])
                fold_risks[i, r * folds + f] = risk.value
    mean = fold_risks.mean(axis=1)
    best = int(np.argmin(mean))  # first minimum wins ties
    table = [
        {"spec": s.label(), "risk": float(mean[i]), "fold_risks": [float(v) for v in fold_risks[i]]}
        for i, s in enumerate(specs)
    ]
    return CVResult(specs[best], best, table, folds)


def draw_resample(p: np.ndarray, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if n_draws < 1:
        raise DataError("n_draws must be >= 1")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise DataError("sampling probabilities must be nonnegative and sum to 1")
    return rng.choice(p.size, size=n_draws, replace=True, p=p)


def importance_sampled_fit(spec: LearnerSpec, X, y, p, n_draws: int | None = None, seed: int = 0):
    """Fit unweighted on a with-replacement resample drawn with probabilities ``p``.

    The drawn row indices are kept on the model as ``resample_index_``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    idx = draw_resample(p, X.shape[0] if n_draws is None else n_draws, np.random.default_rng(seed))
    if np.unique(idx).size == 1:
        warnings.warn("resample holds a single distinct row; fit is degenerate", RuntimeWarning, stacklevel=2)
    model = spec.build().fit(X[idx], y[idx])
    model.resample_index_ = idx
    return model


@dataclass
class StratumFit:
    stratum: int
    train_pool: tuple[int, ...]
    n_train: int
    n_target: int
    cv: CVResult | None
    model: object | None


@dataclass
class FitPredictResult:
    """Target predictions keyed by original row index, plus per-stratum models."""

    target_index: np.ndarray
    prediction: np.ndarray
    stratum: np.ndarray
    source_index: np.ndarray
    source_prediction: np.ndarray
    strata: list[StratumFit]

    def cv_rows(self) -> list[dict]:
        rows = []
        for sf in self.strata:
            if sf.cv is None:
                continue
            for i, r in enumerate(sf.cv.table):
                rows.append({"stratum": sf.stratum, "spec": r["spec"], "risk": r["risk"], "selected": i == sf.cv.best_index})
        return rows


def _effective_folds(folds: int, n: int) -> int:
    if n < 2:
        raise DataError(f"cannot cross-validate on {n} rows")
    if n < folds:
        log.warning("only %d training rows; using %d folds instead of %d", n, n, folds)
    return min(folds, n)


def _fit_select(specs, X, y, folds, seed, loss_kind, repeats=1):
    folds = _effective_folds(folds, X.shape[0])
    if len(specs) == 1:
        cv = CVResult(specs[0], 0, [{"spec": specs[0].label(), "risk": float("nan"), "fold_risks": []}], folds)
    else:
        cv = cross_validate(specs, X, y, folds, loss_kind, seed=seed, repeats=repeats)
    return cv, cv.best.build().fit(X, y)


def stratlearn_fit_predict(
    specs: Sequence[LearnerSpec],
    d: Dataset,
    a: StrataAssignment,
    folds: int = 10,
    seed: int = 0,
    loss_kind: str | None = None,
    repeats: int = 1,
) -> FitPredictResult:
    """Cross-validate, fit and predict separately within each propensity stratum.

    Stratum ``j`` trains on the source rows of its merge pool (uniform
    weights) and predicts only its own target rows. Strata without target
    rows are skipped. Sub-task seeds come from :func:`task_seed`.
    """
    specs = list(specs)
    d.require_both_domains()
    s = d.s
    fits: list[StratumFit] = []
    t_idx, t_pred, t_str = [], [], []
    s_idx, s_pred = [], []
    for j in range(1, a.k + 1):
        tgt = np.flatnonzero((a.stratum_of == j) & (s == 0))
        train = a.training_rows(j, s)
        if tgt.size == 0:
            fits.append(StratumFit(j, a.merge_map[j], train.size, 0, None, None))
            continue
        if train.size == 0:
            raise DataError(f"stratum {j} has no source rows to train on")
        cv, model = _fit_select(specs, d.X[train], d.y[train], folds, task_seed(seed, j), loss_kind, repeats)
        fits.append(StratumFit(j, a.merge_map[j], train.size, tgt.size, cv, model))
        t_idx.append(tgt)
        t_pred.append(model.predict(d.X[tgt]))
        t_str.append(np.full(tgt.size, j))
        own_src = np.flatnonzero((a.stratum_of == j) & (s == 1))
        s_idx.append(own_src)
        s_pred.append(model.predict(d.X[own_src]) if own_src.size else np.empty(0))
    return _collect(fits, t_idx, t_pred, t_str, s_idx, s_pred)


def _collect(fits, t_idx, t_pred, t_str, s_idx, s_pred) -> FitPredictResult:
    ti = np.concatenate(t_idx)
    order = np.argsort(ti, kind="stable")
    si = np.concatenate(s_idx) if s_idx else np.empty(0, dtype=np.int64)
    sp = np.concatenate(s_pred) if s_pred else np.empty(0)
    sorder = np.argsort(si, kind="stable")
    return FitPredictResult(
        target_index=ti[order],
        prediction=np.concatenate(t_pred)[order],
        stratum=np.concatenate(t_str)[order],
        source_index=si[sorder],
        source_prediction=sp[sorder],
        strata=fits,
    )


def biased_fit_predict(
    specs: Sequence[LearnerSpec],
    d: Dataset,
    folds: int = 10,
    seed: int = 0,
    loss_kind: str | None = None,
    repeats: int = 1,
) -> FitPredictResult:
    """Unadjusted fit on all source rows: the one-stratum case (same seed derivation)."""
    d.require_both_domains()
    src = np.flatnonzero(d.s == 1)
    tgt = np.flatnonzero(d.s == 0)
    cv, model = _fit_select(list(specs), d.X[src], d.y[src], folds, task_seed(seed, 1), loss_kind, repeats)
    sf = StratumFit(1, (1,), src.size, tgt.size, cv, model)
    return _collect([sf], [tgt], [model.predict(d.X[tgt])], [np.ones(tgt.size, dtype=np.int64)],
                    [src], [model.predict(d.X[src])])


def weighted_fit_predict(
    specs: Sequence[LearnerSpec],
    d: Dataset,
    w: np.ndarray,
    mode: str,
    folds: int = 10,
    seed: int = 0,
    loss_kind: str | None = None,
    n_draws: int | None = None,
    repeats: int = 1,
) -> FitPredictResult:
    """Importance-weighting baselines on all source rows.

    ``weighted_erm``: weighted fits, weighted held-out losses.
    ``iwcv``: unweighted fits, weighted held-out losses.
    ``importance_sampling``: ordinary CV and fit on a resample drawn
    proportionally to ``w p(s=0) + p(s=1)``.
    ``iwcv_plus_sampling``: hyperparameters by IWCV, final fit on the resample.
    """
    from stratlearn.weights import sampling_probabilities

    if mode not in MODES:
        raise DataError(f"unknown mode {mode!r}; expected one of {MODES}")
    specs = list(specs)
    d.require_both_domains()
    src = np.flatnonzero(d.s == 1)
    tgt = np.flatnonzero(d.s == 0)
    w = np.asarray(w, dtype=float)
    if w.shape != src.shape:
        raise DataError("need one weight per source row")
    X, y = d.X[src], d.y[src]
    nf = _effective_folds(folds, src.size)
    cv_seed, fit_seed = task_seed(seed, 1), task_seed(seed, 2)

    def select(**kw):
        if len(specs) == 1:
            return CVResult(specs[0], 0, [{"spec": specs[0].label(), "risk": float("nan"), "fold_risks": []}], nf)
        return cross_validate(specs, kw.pop("X", X), kw.pop("y", y), nf, loss_kind, seed=cv_seed, repeats=repeats, **kw)

    if mode == "weighted_erm":
        cv = select(w=w, train_weights=w)
        model = cv.best.build().fit(X, y, w)
    elif mode == "iwcv":
        cv = select(w=w)
        model = cv.best.build().fit(X, y)
    else:
        p = sampling_probabilities(w, src.size, tgt.size)
        idx = draw_resample(p, n_draws or src.size, np.random.default_rng(fit_seed))
        if mode == "importance_sampling":
            cv = select(X=X[idx], y=y[idx])
        else:
            cv = select(w=w)
        model = cv.best.build().fit(X[idx], y[idx])
        model.resample_index_ = idx
    sf = StratumFit(1, (1,), src.size, tgt.size, cv, model)
    return _collect([sf], [tgt], [model.predict(d.X[tgt])], [np.ones(tgt.size, dtype=np.int64)],
                    [src], [model.predict(X)])
