"""Importance weights w(x) = p_T(x) / p_S(x) on source rows.

Four estimators: IPS (Bayes identity on propensity scores), KLIEP, uLSIF
and nearest-neighbor counting. KLIEP and uLSIF model the ratio as a
nonnegative combination of Gaussian kernels centered at target points.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from stratlearn.errors import DataError, FitFailure

log = logging.getLogger(__name__)

METHODS = ("ips", "kliep", "ulsif", "nn")
DEFAULT_N_CENTERS = 100
DEFAULT_LAMBDA_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0)


@dataclass(frozen=True)
class WeightVector:
    w: np.ndarray
    method: str
    hyperparams: dict = field(default_factory=dict)
    alpha: np.ndarray | None = None
    centers: np.ndarray | None = None

    def __post_init__(self) -> None:
        w = np.asarray(self.w, dtype=float)
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise FitFailure(f"{self.method}: weights must be finite and nonnegative")
        object.__setattr__(self, "w", w)

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        """Kernel-model weights at new points (KLIEP / uLSIF only)."""
        if self.alpha is None:
            raise ValueError(f"{self.method} weights are only defined on the fitted source rows")
        return gaussian_kernel(X, self.centers, self.hyperparams["sigma"]) @ self.alpha


def gaussian_kernel(X: np.ndarray, C: np.ndarray, sigma: float) -> np.ndarray:
    """``exp(-||x - c||^2 / (2 sigma^2))`` for every row of ``X`` against every row of ``C``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    sq = np.sum(X**2, axis=1)[:, None] + np.sum(C**2, axis=1)[None, :] - 2.0 * X @ C.T
    return np.exp(-np.maximum(sq, 0.0) / (2.0 * sigma**2))


def median_distance(X: np.ndarray, rng: np.random.Generator, max_points: int = 300) -> float:
    if X.shape[0] > max_points:
        X = X[rng.choice(X.shape[0], max_points, replace=False)]
    sq = np.sum(X**2, axis=1)[:, None] + np.sum(X**2, axis=1)[None, :] - 2.0 * X @ X.T
    iu = np.triu_indices(X.shape[0], k=1)
    med = float(np.median(np.sqrt(np.maximum(sq[iu], 0.0))))
    return med if med > 0 else 1.0


def default_sigma_grid(X_S: np.ndarray, X_T: np.ndarray, seed: int = 0, n: int = 10) -> np.ndarray:
    """``n`` log-spaced bandwidths from 0.1x to 10x the median pairwise distance."""
    rng = np.random.default_rng(seed)
    med = median_distance(np.vstack([X_S, X_T]), rng)
    return med * np.logspace(-1, 1, n)


def _check_pair(X_S: np.ndarray, X_T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X_S = np.atleast_2d(np.asarray(X_S, dtype=float))
    X_T = np.atleast_2d(np.asarray(X_T, dtype=float))
    if X_S.shape[0] == 0 or X_T.shape[0] == 0:
        raise DataError("need nonempty source and target samples")
    if X_S.shape[1] != X_T.shape[1]:
        raise DataError(f"source has {X_S.shape[1]} columns, target {X_T.shape[1]}")
    return X_S, X_T


def _pick_centers(X_T: np.ndarray, n_centers: int, rng: np.random.Generator) -> np.ndarray:
    if not 1 <= n_centers <= X_T.shape[0]:
        raise DataError(f"n_centers must lie in [1, n_T={X_T.shape[0]}], got {n_centers}")
    return X_T[np.sort(rng.choice(X_T.shape[0], n_centers, replace=False))]


# --------------------------------------------------------------------------- IPS


def ips_weights(e: np.ndarray, n_S: int, n_T: int) -> WeightVector:
    """``w = (n_S / n_T) (1 / e - 1)`` from propensity scores on source rows."""
    e = np.asarray(e, dtype=float)
    if np.any((e <= 0) | (e >= 1)):
        raise DataError("propensity scores must lie strictly inside (0, 1)")
    if n_S < 1 or n_T < 1:
        raise DataError("n_S and n_T must be positive")
    return WeightVector(w=(n_S / n_T) * (1.0 / e - 1.0), method="ips", hyperparams={"n_S": n_S, "n_T": n_T})


# --------------------------------------------------------------------------- KLIEP


def _kliep_project(alpha: np.ndarray, b: np.ndarray) -> np.ndarray:
    alpha = alpha + b * (1.0 - b @ alpha) / (b @ b)
    alpha = np.maximum(alpha, 0.0)
    total = b @ alpha
    if not total > 0:
        return np.full_like(alpha, np.nan)
    return alpha / total


def _kliep_objective(A: np.ndarray, alpha: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        v = float(np.mean(np.log(A @ alpha)))
    return v if np.isfinite(v) else -np.inf


def kliep_alpha(
    A_T: np.ndarray,
    b: np.ndarray,
    max_iter: int = 500,
    tol: float = 1e-7,
) -> tuple[np.ndarray, float]:
    """Maximize ``mean log(A_T alpha)`` over ``alpha >= 0``, ``b' alpha = 1``.

    Projected gradient ascent with backtracking; the step grows after each
    accepted move. Returns ``(alpha, objective)``; the objective is ``-inf``
    when no feasible point with positive weights on every target row is found.
    """
    alpha = _kliep_project(np.ones(A_T.shape[1]), b)
    if np.any(np.isnan(alpha)):
        return alpha, -np.inf
    obj = _kliep_objective(A_T, alpha)
    if not np.isfinite(obj):
        return alpha, -np.inf
    eta = None
    for _ in range(max_iter):
        grad = A_T.T @ (1.0 / (A_T @ alpha)) / A_T.shape[0]
        if eta is None:
            eta = float(np.linalg.norm(alpha) / max(np.linalg.norm(grad), 1e-300))
        accepted = False
        for _ in range(40):
            cand = _kliep_project(alpha + eta * grad, b)
            cand_obj = _kliep_objective(A_T, cand) if not np.any(np.isnan(cand)) else -np.inf
            if cand_obj > obj:
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            break
        gain = cand_obj - obj
        alpha, obj = cand, cand_obj
        eta *= 2.0
        if gain < tol:
            break
    return alpha, obj


def kliep_weights(
    X_S: np.ndarray,
    X_T: np.ndarray,
    sigma_grid: np.ndarray | None = None,
    n_centers: int | None = None,
    seed: int = 0,
    n_folds: int = 5,
    centers: np.ndarray | None = None,
) -> WeightVector:
    """KLIEP density-ratio fit with the bandwidth chosen by likelihood cross-validation.

    The CV score of a bandwidth is the mean held-out ``log w`` over target
    folds. Raises :class:`FitFailure` when no bandwidth yields a finite objective.
    """
    X_S, X_T = _check_pair(X_S, X_T)
    rng = np.random.default_rng(seed)
    if centers is None:
        centers = _pick_centers(X_T, n_centers or min(DEFAULT_N_CENTERS, X_T.shape[0]), rng)
    if sigma_grid is None:
        sigma_grid = default_sigma_grid(X_S, X_T, seed)
    sigma_grid = np.atleast_1d(np.asarray(sigma_grid, dtype=float))
    n_T = X_T.shape[0]
    folds = np.array_split(rng.permutation(n_T), min(n_folds, n_T))

    scores = []
    for sigma in sigma_grid:
        A = gaussian_kernel(X_T, centers, sigma)
        b = gaussian_kernel(X_S, centers, sigma).mean(axis=0)
        if len(sigma_grid) == 1:
            scores.append(0.0)
            break
        fold_scores = []
        for held in folds:
            train = np.setdiff1d(np.arange(n_T), held)
            if train.size == 0:
                continue
            alpha, obj = kliep_alpha(A[train], b)
            fold_scores.append(_kliep_objective(A[held], alpha) if np.isfinite(obj) else -np.inf)
        scores.append(float(np.mean(fold_scores)))
    scores = np.array(scores)
    if not np.any(np.isfinite(scores)):
        raise FitFailure("KLIEP: no bandwidth produced a finite likelihood")
    best = int(np.argmax(scores))
    sigma = float(sigma_grid[best])
    A = gaussian_kernel(X_T, centers, sigma)
    Phi_S = gaussian_kernel(X_S, centers, sigma)
    b = Phi_S.mean(axis=0)
    alpha, obj = kliep_alpha(A, b)
    if not np.isfinite(obj):
        raise FitFailure(f"KLIEP: non-finite objective at sigma={sigma:g}")
    w = Phi_S @ alpha
    w = w / np.mean(w)  # remove rounding drift from the constraint
    log.info("KLIEP sigma=%g objective=%g", sigma, obj)
    return WeightVector(
        w=w,
        method="kliep",
        hyperparams={"sigma": sigma, "n_centers": int(centers.shape[0]), "seed": seed, "cv_score": float(scores[best])},
        alpha=alpha,
        centers=centers,
    )


# --------------------------------------------------------------------------- uLSIF


def ulsif_alpha(Phi_S: np.ndarray, Phi_T: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Unconstrained solution ``(H + lam I)^-1 h`` and its clipped version."""
    H = Phi_S.T @ Phi_S / Phi_S.shape[0]
    h = Phi_T.mean(axis=0)
    raw = np.linalg.solve(H + lam * np.eye(H.shape[0]), h)
    return raw, np.maximum(raw, 0.0)


def ulsif_loocv(Phi_S: np.ndarray, Phi_T: np.ndarray, lam: float) -> float:
    """Closed-form leave-one-out squared-error score of uLSIF.

    Pairs the first ``min(n_S, n_T)`` source and target rows and removes each
    pair in turn, using the Sherman-Morrison update of the regularized system.
    """
    n_S, n_T = Phi_S.shape[0], Phi_T.shape[0]
    nb = Phi_S.shape[1]
    n_min = min(n_S, n_T)
    H = Phi_S.T @ Phi_S / n_S
    h = Phi_T.mean(axis=0)
    X_de = Phi_S[:n_min].T
    X_nu = Phi_T[:n_min].T
    B = H + lam * (n_S - 1) / n_S * np.eye(nb)
    Binv_X = np.linalg.solve(B, X_de)
    Binv_h = np.linalg.solve(B, h)
    denom = n_S - np.sum(X_de * Binv_X, axis=0)
    B0 = Binv_h[:, None] + Binv_X * ((h @ Binv_X) / denom)[None, :]
    B1 = np.linalg.solve(B, X_nu) + Binv_X * (np.sum(X_nu * Binv_X, axis=0) / denom)[None, :]
    B2 = np.maximum(0.0, (n_S - 1) / (n_S * (n_T - 1)) * (n_T * B0 - B1))
    r_de = np.sum(X_de * B2, axis=0)
    r_nu = np.sum(X_nu * B2, axis=0)
    return float(np.mean(r_de**2) / 2.0 - np.mean(r_nu))


def ulsif_weights(
    X_S: np.ndarray,
    X_T: np.ndarray,
    sigma_grid: np.ndarray | None = None,
    lambda_grid: np.ndarray | None = None,
    n_centers: int | None = None,
    seed: int = 0,
    centers: np.ndarray | None = None,
) -> WeightVector:
    """uLSIF density-ratio fit with ``(sigma, lambda)`` chosen by leave-one-out CV."""
    X_S, X_T = _check_pair(X_S, X_T)
    rng = np.random.default_rng(seed)
    if centers is None:
        centers = _pick_centers(X_T, n_centers or min(DEFAULT_N_CENTERS, X_T.shape[0]), rng)
    if sigma_grid is None:
        sigma_grid = default_sigma_grid(X_S, X_T, seed)
    lambda_grid = np.atleast_1d(np.asarray(DEFAULT_LAMBDA_GRID if lambda_grid is None else lambda_grid, dtype=float))
    sigma_grid = np.atleast_1d(np.asarray(sigma_grid, dtype=float))
    if np.any(lambda_grid <= 0):
        raise DataError("uLSIF lambda grid must be strictly positive")

    if sigma_grid.size * lambda_grid.size == 1:
        sigma, lam, best_score = float(sigma_grid[0]), float(lambda_grid[0]), float("nan")
    else:
        if X_T.shape[0] < 2 or X_S.shape[0] < 2:
            raise DataError("uLSIF cross-validation needs at least 2 source and 2 target rows")
        perm_S = rng.permutation(X_S.shape[0])
        perm_T = rng.permutation(X_T.shape[0])
        best_score, sigma, lam = np.inf, float(sigma_grid[0]), float(lambda_grid[0])
        for sg in sigma_grid:
            Phi_S = gaussian_kernel(X_S[perm_S], centers, sg)
            Phi_T = gaussian_kernel(X_T[perm_T], centers, sg)
            for lm in lambda_grid:
                score = ulsif_loocv(Phi_S, Phi_T, lm)
                if score < best_score:
                    best_score, sigma, lam = score, float(sg), float(lm)
    Phi_S = gaussian_kernel(X_S, centers, sigma)
    Phi_T = gaussian_kernel(X_T, centers, sigma)
    _, alpha = ulsif_alpha(Phi_S, Phi_T, lam)
    log.info("uLSIF sigma=%g lambda=%g", sigma, lam)
    return WeightVector(
        w=Phi_S @ alpha,
        method="ulsif",
        hyperparams={"sigma": sigma, "lambda": lam, "n_centers": int(centers.shape[0]), "seed": seed, "cv_score": float(best_score)},
        alpha=alpha,
        centers=centers,
    )


# --------------------------------------------------------------------------- NN


def nn_weights(X_S: np.ndarray, X_T: np.ndarray, k_neighbors: int = 1) -> WeightVector:
    """Count how often each source row is among the ``k`` nearest source rows of a target row.

    ``w_i = (n_S / n_T) * count_i / k``, so the weights average exactly 1 over
    the source sample.
    """
    X_S, X_T = _check_pair(X_S, X_T)
    n_S, n_T = X_S.shape[0], X_T.shape[0]
    if not 1 <= k_neighbors <= n_S:
        raise DataError(f"k_neighbors must lie in [1, n_S={n_S}], got {k_neighbors}")
    _, idx = cKDTree(X_S).query(X_T, k=k_neighbors)
    counts = np.bincount(np.asarray(idx).reshape(-1), minlength=n_S)
    return WeightVector(
        w=(n_S / n_T) * counts / k_neighbors,
        method="nn",
        hyperparams={"k_neighbors": int(k_neighbors)},
    )


# --------------------------------------------------------------------------- sampling


def sampling_probabilities(w: WeightVector | np.ndarray, n_S: int, n_T: int) -> np.ndarray:
    """Resampling distribution over source rows, proportional to ``w p(s=0) + p(s=1)``."""
    w = np.asarray(w.w if isinstance(w, WeightVector) else w, dtype=float)
    if np.any(~np.isfinite(w)) or np.any(w < 0):
        raise DataError("weights must be finite and nonnegative")
    n = n_S + n_T
    p = w * (n_T / n) + n_S / n
    total = p.sum()
    assert total > 0
    return p / total
