"""Synthetic labeled data with a single shift-driving covariate.

All covariates are standard normal and column ``x0`` drives the shift.
Target rows are drawn by beta rejection sampling on the min-max rescaled
``x0`` (see :func:`stratlearn.tabular.simulate_shift`). Because almost all
of a normal sample sits below the Beta(13, 4) mode on that scale, selection
is increasing in ``x0``; about a fifth of the rows become target rows.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from stratlearn.tabular import SHIFT_SCENARIOS, Dataset, ShiftSpec, simulate_shift


def _covariates(rng: np.random.Generator, n: int, n_features: int) -> np.ndarray:
    return rng.standard_normal((n, n_features))


def _names(n_features: int) -> tuple[str, ...]:
    return tuple(f"x{j}" for j in range(n_features))


def _shifted(X: np.ndarray, y: np.ndarray, beta: tuple[float, float], seed: int) -> Dataset:
    d = Dataset(X=X, s=np.ones(X.shape[0], dtype=int), column_names=_names(X.shape[1]), y=y, label_name="y")
    return simulate_shift(d, ShiftSpec(beta[0], beta[1], shift_column=0, seed=seed + 1))


def regression_response(X: np.ndarray, rng: np.random.Generator, noise: float = 0.5) -> np.ndarray:
    """Response curved in ``x0`` plus linear terms in ``x1``, ``x2``."""
    x0 = X[:, 0]
    return x0**2 + np.sin(2.0 * x0) + 0.5 * X[:, 1] - 0.5 * X[:, 2] + noise * rng.standard_normal(X.shape[0])


def make_regression(n: int = 10_000, n_features: int = 5, seed: int = 0,
                    beta: tuple[float, float] = SHIFT_SCENARIOS["medium"]) -> Dataset:
    rng = np.random.default_rng(seed)
    X = _covariates(rng, n, n_features)
    return _shifted(X, regression_response(X, rng), beta, seed)


def classification_logit(X: np.ndarray) -> np.ndarray:
    """The effect of ``x1`` changes sign at ``x0 = 0.5``."""
    return 2.0 * (X[:, 0] - 0.5) * X[:, 1] + 0.8 * X[:, 2]


def make_classification(n: int = 10_000, n_features: int = 5, seed: int = 0,
                        beta: tuple[float, float] = SHIFT_SCENARIOS["medium"]) -> Dataset:
    rng = np.random.default_rng(seed)
    X = _covariates(rng, n, n_features)
    y = (rng.random(n) < expit(classification_logit(X))).astype(float)
    return _shifted(X, y, beta, seed)


def make_cde(n: int = 6000, n_informative: int = 5, n_noise: int = 10, seed: int = 0,
             beta: tuple[float, float] = SHIFT_SCENARIOS["medium"]) -> Dataset:
    """Heteroscedastic Gaussian response driven by the informative covariates only."""
    rng = np.random.default_rng(seed)
    X = _covariates(rng, n, n_informative + n_noise)
    x0 = X[:, 0]
    rest = X[:, 1:n_informative].sum(axis=1) / np.sqrt(max(n_informative - 1, 1))
    mean = x0 + np.sin(2.0 * x0) + 0.3 * rest
    sd = 0.2 + 0.15 * np.abs(x0)
    y = mean + sd * rng.standard_normal(n)
    return _shifted(X, y, beta, seed)


def make_null(n_per_domain: int = 500, n_features: int = 5, seed: int = 0) -> Dataset:
    """Source and target drawn from one distribution; ``y`` linear plus noise."""
    rng = np.random.default_rng(seed)
    n = 2 * n_per_domain
    X = rng.standard_normal((n, n_features))
    y = X @ np.linspace(1.0, 0.2, n_features) + 0.5 * rng.standard_normal(n)
    s = np.r_[np.ones(n_per_domain, dtype=int), np.zeros(n_per_domain, dtype=int)]
    return Dataset(X=X, s=s, column_names=_names(n_features), y=y, label_name="y")


def add_noise_covariates(d: Dataset, n_extra: int, seed: int = 0) -> Dataset:
    """Append ``n_extra`` independent standard normal columns; rows, labels and indicator unchanged."""
    rng = np.random.default_rng([seed, n_extra])
    start = d.n_features
    extra = rng.standard_normal((d.n, n_extra))
    names = d.column_names + tuple(f"x{j}" for j in range(start, start + n_extra))
    return d.with_covariates(np.column_stack([d.X, extra]), names)
