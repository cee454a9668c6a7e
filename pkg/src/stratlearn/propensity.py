"""Propensity scores e(x) = P(s=1 | x) by ridge-penalized logistic regression."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from stratlearn.errors import DataError
from stratlearn.tabular import Dataset

log = logging.getLogger(__name__)

# Scores are kept strictly inside (0, 1) even when the linear predictor saturates.
SCORE_EPS = float(np.finfo(float).eps)
SEPARATION_CAP = 50.0


@dataclass(frozen=True)
class IRLSResult:
    beta: np.ndarray  # intercept first
    converged: bool
    iterations: int
    objective_path: tuple[float, ...]


def penalized_loglik(Z: np.ndarray, y: np.ndarray, w: np.ndarray, beta: np.ndarray, pen: np.ndarray) -> float:
    eta = Z @ beta
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))) - 0.5 * np.sum(pen * beta**2))


def _newton_direction(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(H, g, rcond=None)[0]


def logistic_irls(
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray | None = None,
    ridge_lambda: float = 1e-6,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> IRLSResult:
    """Maximize the weighted ridge-penalized binomial log-likelihood.

    The objective is ``sum_i w_i [y_i eta_i - log(1 + exp(eta_i))] - lambda/2 ||slopes||^2``
    with an unpenalized intercept. Each Newton step is halved until the
    objective does not decrease, so the recorded path is monotone.
    Stops when ``max |step| <= tol * max(1, max |beta|)``.
    """
    n, F = X.shape
    y = np.asarray(y, dtype=float)
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    Z = np.column_stack([np.ones(n), X])
    pen = np.full(F + 1, float(ridge_lambda))
    pen[0] = 0.0

    ybar = float(np.sum(w * y) / np.sum(w))
    if not 0.0 < ybar < 1.0:
        raise DataError("logistic fit needs both classes with positive weight")
    beta = np.zeros(F + 1)
    beta[0] = np.log(ybar / (1.0 - ybar))
    obj = penalized_loglik(Z, y, w, beta, pen)
    path = [obj]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(Z @ beta)
        g = Z.T @ (w * (y - p)) - pen * beta
        H = (Z * (w * p * (1.0 - p))[:, None]).T @ Z + np.diag(pen)
        step = _newton_direction(H, g)
        t = 1.0
        while True:
            cand = beta + t * step
            cand_obj = penalized_loglik(Z, y, w, cand, pen)
            if cand_obj >= obj or t < 1e-10:
                break
            t *= 0.5
        scale = max(1.0, float(np.max(np.abs(beta))))
        if cand_obj < obj:
            # no ascent possible at floating-point resolution
            converged = float(np.max(np.abs(step))) <= 1e-6 * scale
            break
        delta = float(np.max(np.abs(cand - beta)))
        beta, obj = cand, cand_obj
        path.append(obj)
        if delta <= tol * scale:
            converged = True
            break
    return IRLSResult(beta=beta, converged=converged, iterations=it, objective_path=tuple(path))


@dataclass(frozen=True)
class PropensityModel:
    intercept: float
    coefficients: np.ndarray
    ridge_lambda: float
    converged: bool
    iterations: int
    column_names: tuple[str, ...] = ()
    flagged: tuple[bool, ...] = ()
    loglik_path: tuple[float, ...] = ()

    def to_text(self) -> str:
        lines = [
            f"ridge_lambda = {self.ridge_lambda!r}",
            f"converged = {'true' if self.converged else 'false'}",
            f"iterations = {self.iterations}",
            f"intercept = {self.intercept!r}",
        ]
        names = self.column_names or tuple(f"x{j}" for j in range(len(self.coefficients)))
        flagged = self.flagged or (False,) * len(names)
        for name, c, fl in zip(names, self.coefficients, flagged):
            lines.append(f"coef.{name} = {float(c)!r}" + ("  # constant column, excluded" if fl else ""))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> PropensityModel:
        kv: dict[str, str] = {}
        names: list[str] = []
        flagged: list[bool] = []
        for line in text.splitlines():
            body, _, comment = line.partition("#")
            if not body.strip():
                continue
            k, _, v = body.partition("=")
            k, v = k.strip(), v.strip()
            kv[k] = v
            if k.startswith("coef."):
                names.append(k[5:])
                flagged.append("excluded" in comment)
        return cls(
            intercept=float(kv["intercept"]),
            coefficients=np.array([float(kv[f"coef.{c}"]) for c in names]),
            ridge_lambda=float(kv["ridge_lambda"]),
            converged=kv["converged"] == "true",
            iterations=int(kv["iterations"]),
            column_names=tuple(names),
            flagged=tuple(flagged),
        )


def fit_propensity(
    d: Dataset,
    ridge_lambda: float = 1e-6,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> PropensityModel:
    """Fit P(s=1 | x) on pooled source and target rows with main effects only.

    Zero-variance covariates are excluded (coefficient fixed at 0). A fit that
    hits ``max_iter`` is returned with ``converged=False``; very large
    coefficients raise a separation warning.
    """
    d.require_both_domains()
    if ridge_lambda < 0:
        raise ValueError("ridge_lambda must be nonnegative")
    X = d.X
    active = np.ptp(X, axis=0) > 0
    res = logistic_irls(X[:, active], d.s.astype(float), None, ridge_lambda, max_iter, tol)
    coef = np.zeros(d.n_features)
    coef[active] = res.beta[1:]
    if not res.converged:
        log.warning("propensity fit did not converge in %d iterations", max_iter)
    if np.any(np.abs(coef) > SEPARATION_CAP):
        warnings.warn(
            f"propensity coefficients exceed {SEPARATION_CAP:g}: source and target are (nearly) separable",
            RuntimeWarning,
            stacklevel=2,
        )
    return PropensityModel(
        intercept=float(res.beta[0]),
        coefficients=coef,
        ridge_lambda=float(ridge_lambda),
        converged=res.converged,
        iterations=res.iterations,
        column_names=d.column_names,
        flagged=tuple(bool(f) for f in ~active),
        loglik_path=res.objective_path,
    )


def predict_propensity(m: PropensityModel, X: np.ndarray) -> np.ndarray:
    """Scores ``logistic(intercept + X @ coefficients)``, kept strictly inside (0, 1)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(m.coefficients):
        raise DataError(f"expected {len(m.coefficients)} covariate columns, got shape {X.shape}")
    return np.clip(expit(m.intercept + X @ m.coefficients), SCORE_EPS, 1.0 - SCORE_EPS)
