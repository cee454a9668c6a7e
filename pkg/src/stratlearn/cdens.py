"""Nearest-neighbor conditional density estimators of a [0, 1] response on a fixed grid.

Densities are stored as values on ``GRID`` (201 equally spaced points on
[0, 1]), integrated with the trapezoid rule and interpolated linearly between
nodes (zero outside [0, 1]). Every emitted density is renormalized to unit
trapezoid mass.

The fitting criterion is the generalized L2 risk
``mean_q( int f(z|x)^2 dz ) - 2 mean_p( w f(z|x) )`` where the quadratic
average runs over "quadratic" rows (unlabeled rows when importance weights
are used) and the point average over labeled rows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from stratlearn.errors import DataError, FitFailure
from stratlearn.learn import fold_ids, task_seed
from stratlearn.strata import StrataAssignment
from stratlearn.tabular import Dataset

log = logging.getLogger(__name__)

N_GRID = 201
GRID = np.linspace(0.0, 1.0, N_GRID)
STEP = GRID[1] - GRID[0]
KINDS = ("hist_nn", "ker_nn", "series")

DEFAULT_GRIDS: dict[str, dict[str, tuple]] = {
    "hist_nn": {"n_neighbors": (5, 10, 20, 40, 80), "n_bins": (5, 10, 20, 40)},
    "ker_nn": {"n_neighbors": (5, 10, 20, 40, 80), "bandwidth": (0.01, 0.02, 0.05, 0.1, 0.2)},
    "series": {"n_neighbors": (5, 10, 20, 40, 80), "n_terms": (2, 4, 8, 16, 32)},
}
_SECOND = {"hist_nn": "n_bins", "ker_nn": "bandwidth", "series": "n_terms"}


def trapz_rows(F: np.ndarray) -> np.ndarray:
    """Trapezoid integral over GRID of each row of ``F``."""
    F = np.atleast_2d(F)
    return STEP * (F.sum(axis=1) - 0.5 * (F[:, 0] + F[:, -1]))


def interp_rows(F: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Row ``i`` of ``F`` linearly interpolated at ``z[i]``; zero outside [0, 1]."""
    F = np.atleast_2d(F)
    z = np.asarray(z, dtype=float)
    inside = (z >= 0.0) & (z <= 1.0)
    zc = np.clip(z, 0.0, 1.0)
    lo = np.minimum((zc / STEP).astype(np.int64), N_GRID - 2)
    frac = zc / STEP - lo
    rows = np.arange(F.shape[0])
    val = F[rows, lo] * (1.0 - frac) + F[rows, lo + 1] * frac
    return np.where(inside, val, 0.0)


def normalize_rows(F: np.ndarray) -> np.ndarray:
    F = np.maximum(F, 0.0)
    mass = trapz_rows(F)
    bad = mass <= 0
    if bad.any():
        log.warning("%d densities had no mass on [0, 1]; replaced by the uniform density", int(bad.sum()))
        F = F.copy()
        F[bad] = 1.0
        mass = np.where(bad, 1.0, mass)
    return F / mass[:, None]


@dataclass(frozen=True)
class ResponseScale:
    """Min-max map of the response onto [0, 1]."""

    lo: float
    hi: float

    @classmethod
    def fit(cls, y: np.ndarray) -> ResponseScale:
        y = np.asarray(y, dtype=float)
        lo, hi = float(np.min(y)), float(np.max(y))
        if not hi > lo:
            raise DataError("response is constant; cannot rescale to [0, 1]")
        return cls(lo, hi)

    def forward(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.lo) / (self.hi - self.lo)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return self.lo + np.asarray(z, dtype=float) * (self.hi - self.lo)


def _cosine_basis(z: np.ndarray, n_terms: int) -> np.ndarray:
    """Columns 1, sqrt(2) cos(pi j z) for j = 1..n_terms."""
    j = np.arange(n_terms + 1)
    B = np.sqrt(2.0) * np.cos(np.pi * np.outer(z, j))
    B[:, 0] = 1.0
    return B


def _neighbor_family(kind: str, z_train: np.ndarray, nbr: np.ndarray, n_list, second_list):
    """Yield ``((n_neighbors, second), densities)`` for every grid point.

    ``nbr`` holds neighbor indices ordered by distance, one row per query;
    running sums over neighbors make every neighbor count cost one pass.
    """
    m, nmax = nbr.shape
    zn = z_train[nbr]
    wanted = sorted(set(n_list))
    if kind == "ker_nn":
        for h in second_list:
            acc = np.zeros((m, N_GRID))
            for t in range(nmax):
                acc += np.exp(-0.5 * ((GRID[None, :] - zn[:, t:t + 1]) / h) ** 2)
                if t + 1 in wanted:
                    yield (t + 1, h), normalize_rows(acc / (t + 1))
    elif kind == "hist_nn":
        for nb in second_list:
            grid_bin = np.minimum((GRID * nb).astype(np.int64), nb - 1)
            zbin = np.minimum((zn * nb).astype(np.int64), nb - 1)
            counts = np.zeros((m, nb))
            rows = np.arange(m)
            for t in range(nmax):
                np.add.at(counts, (rows, zbin[:, t]), 1.0)
                if t + 1 in wanted:
                    yield (t + 1, nb), normalize_rows(counts[:, grid_bin])
    elif kind == "series":
        jmax = max(second_list)
        basis_grid = _cosine_basis(GRID, jmax)
        coef = np.zeros((m, jmax + 1))
        for t in range(nmax):
            coef += _cosine_basis(zn[:, t], jmax)
            if t + 1 in wanted:
                for J in second_list:
                    F = (coef[:, : J + 1] / (t + 1)) @ basis_grid[:, : J + 1].T
                    yield (t + 1, J), normalize_rows(F)
    else:
        raise DataError(f"unknown estimator kind {kind!r}; expected one of {KINDS}")


def _neighbors(tree: cKDTree, n_train: int, Xq: np.ndarray, n_max: int) -> np.ndarray:
    k = min(n_max, n_train)
    if k < n_max:
        log.warning("only %d training rows; neighbor counts capped at %d", n_train, k)
    _, idx = tree.query(Xq, k=k)
    return np.asarray(idx).reshape(Xq.shape[0], k)


def _cap(n_list, n_train: int) -> tuple[int, ...]:
    return tuple(dict.fromkeys(min(int(n), n_train) for n in n_list))


class CDEstimator:
    """One fitted nearest-neighbor density estimator with fixed hyperparameters."""

    def __init__(self, kind: str, params: dict, X: np.ndarray, z: np.ndarray):
        if kind not in KINDS:
            raise DataError(f"unknown estimator kind {kind!r}; expected one of {KINDS}")
        self.kind = kind
        self.params = dict(params)
        self.X = np.asarray(X, dtype=float)
        self.z = np.asarray(z, dtype=float)
        if self.X.shape[0] == 0:
            raise DataError("cannot fit a density estimator on zero rows")
        self.tree = cKDTree(self.X)
        self.cv_table: list[dict] = []
        self.oof: np.ndarray | None = None  # out-of-fold densities of the training rows

    def predict(self, Xq: np.ndarray) -> np.ndarray:
        """Density values on GRID, one row per query."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        n = int(self.params["n_neighbors"])
        nbr = _neighbors(self.tree, self.X.shape[0], Xq, n)
        second = self.params[_SECOND[self.kind]]
        for _, F in _neighbor_family(self.kind, self.z, nbr, (nbr.shape[1],), (second,)):
            return F
        raise AssertionError("unreachable")

    def label(self) -> str:
        inner = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.kind}({inner})"


def _risk_parts(F: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return trapz_rows(F**2), interp_rows(F, z)


def _cv_pass(kind, X, z, folds_id, nfold, n_list, second_list, risk_weights, XU, ufold_id):
    """Per-fold generalized risks for every grid point (dict params -> list of fold risks)."""
    out: dict[tuple, list[float]] = {}
    for f in range(nfold):
        tr, ho = folds_id != f, folds_id == f
        tree = cKDTree(X[tr])
        ntr = int(tr.sum())
        ns = _cap(n_list, ntr)
        nbr_ho = _neighbors(tree, ntr, X[ho], max(ns))
        point = {}
        for key, F in _neighbor_family(kind, z[tr], nbr_ho, ns, second_list):
            q, p = _risk_parts(F, z[ho])
            point[key] = (q, p)
        if risk_weights is None:
            for key, (q, p) in point.items():
                out.setdefault(key, []).append(float(np.mean(q) - 2.0 * np.mean(p)))
            continue
        uq = ufold_id == f
        nbr_u = _neighbors(tree, ntr, XU[uq], max(ns))
        for key, F in _neighbor_family(kind, z[tr], nbr_u, ns, second_list):
            _, p = point[key]
            out.setdefault(key, []).append(
                float(np.mean(trapz_rows(F**2)) - 2.0 * np.mean(risk_weights[ho] * p))
            )
    return out


def fit_cde(
    kind: str,
    X: np.ndarray,
    z: np.ndarray,
    hyper_grid: dict | None = None,
    folds: int = 5,
    risk_weights: np.ndarray | None = None,
    X_unlabeled: np.ndarray | None = None,
    seed: int = 0,
    keep_oof: bool = False,
) -> CDEstimator:
    """Select hyperparameters by cross-validated generalized risk, then refit on all rows.

    ``z`` must already lie in [0, 1]. With ``risk_weights`` (one per labeled
    row) the point term is importance weighted and the quadratic term is
    averaged over ``X_unlabeled``, split into the same number of folds.
    ``keep_oof`` stores out-of-fold densities of the selected model.
    """
    X = np.asarray(X, dtype=float)
    z = np.asarray(z, dtype=float)
    n = X.shape[0]
    if z.shape != (n,):
        raise DataError("z must have one entry per row")
    if np.any((z < 0) | (z > 1)):
        raise DataError("z must be rescaled into [0, 1]")
    grid = {**DEFAULT_GRIDS[kind], **(hyper_grid or {})} if kind in DEFAULT_GRIDS else None
    if grid is None:
        raise DataError(f"unknown estimator kind {kind!r}; expected one of {KINDS}")
    n_list, second_list = tuple(grid["n_neighbors"]), tuple(grid[_SECOND[kind]])
    if folds < 2:
        raise DataError("folds must be >= 2")
    if n < folds:
        raise DataError(f"{n} rows cannot be split into {folds} folds")
    rng = np.random.default_rng(seed)
    fid = fold_ids(n, folds, rng)
    XU = ufid = None
    if risk_weights is not None:
        risk_weights = np.asarray(risk_weights, dtype=float)
        if risk_weights.shape != (n,):
            raise DataError("risk_weights must have one entry per labeled row")
        if X_unlabeled is None:
            raise DataError("weighted risk needs the unlabeled rows for its quadratic term")
        XU = np.asarray(X_unlabeled, dtype=float)
        if XU.shape[0] < folds:
            raise DataError("too few unlabeled rows for the fold split")
        ufid = fold_ids(XU.shape[0], folds, rng)

    risks = _cv_pass(kind, X, z, fid, folds, n_list, second_list, risk_weights, XU, ufid)
    keys = list(risks)
    means = np.array([np.mean(risks[k]) for k in keys])
    if not np.all(np.isfinite(means)):
        raise FitFailure("non-finite cross-validated risk")
    best = keys[int(np.argmin(means))]
    params = {"n_neighbors": best[0], _SECOND[kind]: best[1]}
    est = CDEstimator(kind, params, X, z)
    est.cv_table = [
        {"n_neighbors": k[0], _SECOND[kind]: k[1], "risk": float(m), "selected": k == best}
        for k, m in zip(keys, means)
    ]
    if keep_oof:
        oof = np.empty((n, N_GRID))
        for f in range(folds):
            tr, ho = fid != f, fid == f
            part = CDEstimator(kind, params, X[tr], z[tr])
            oof[ho] = part.predict(X[ho])
        est.oof = oof
    return est


def generalized_risk(
    estimator,
    X: np.ndarray,
    z: np.ndarray,
    weights: np.ndarray | None = None,
    X_quadratic: np.ndarray | None = None,
) -> float:
    """Generalized risk of a fitted estimator (or comb) on labeled rows ``(X, z)``.

    The quadratic term averages over ``X_quadratic`` when given, else over ``X``.
    """
    if estimator is None or not hasattr(estimator, "predict"):
        raise DataError("estimator is not fitted")
    F = estimator.predict(X)
    q = trapz_rows(estimator.predict(X_quadratic) ** 2) if X_quadratic is not None else trapz_rows(F**2)
    return risk_from_grids(q, interp_rows(F, z), weights)


def risk_from_grids(quad: np.ndarray, point: np.ndarray, weights: np.ndarray | None = None) -> float:
    """``mean(quad) - 2 mean(w * point)`` from per-row integrals and point densities."""
    if weights is None:
        return float(np.mean(quad) - 2.0 * np.mean(point))
    return float(np.mean(quad) - 2.0 * np.mean(np.asarray(weights, dtype=float) * point))


def target_row_losses(F: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Per-row contributions ``int f^2 - 2 f(z_i)``; their mean is the target risk."""
    return trapz_rows(F**2) - 2.0 * interp_rows(F, z)


def target_risk_cde(estimator, X_T: np.ndarray, z_T: np.ndarray) -> float:
    """Generalized risk on labeled target rows; for evaluation only."""
    return generalized_risk(estimator, X_T, z_T)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u * idx > css - 1.0)[0][-1]
    theta = (css[rho] - 1.0) / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def solve_simplex_qp(M: np.ndarray, b: np.ndarray, tol: float = 1e-9, max_iter: int = 200_000) -> np.ndarray:
    """Minimize ``a'Ma - 2b'a`` over the simplex by projected gradient from the barycenter."""
    M = np.asarray(M, dtype=float)
    b = np.asarray(b, dtype=float)
    if not (np.all(np.isfinite(M)) and np.all(np.isfinite(b))):
        raise FitFailure("non-finite entries in the combination objective")
    p = b.size
    L = 2.0 * float(np.max(np.linalg.eigvalsh((M + M.T) / 2.0)))
    step = 1.0 / L if L > 0 else 1.0
    a = np.full(p, 1.0 / p)
    for _ in range(max_iter):
        nxt = project_simplex(a - step * (2.0 * M @ a - 2.0 * b))
        if np.max(np.abs(nxt - a)) <= tol:
            return nxt
        a = nxt
    log.warning("simplex QP stopped at max_iter=%d", max_iter)
    return a


@dataclass(frozen=True)
class CombWeights:
    alpha: np.ndarray
    risk: float
    component_risks: tuple[float, ...]


def comb_from_grids(
    quad_grids: Sequence[np.ndarray],
    point_grids: Sequence[np.ndarray],
    z: np.ndarray,
    weights: np.ndarray | None = None,
) -> CombWeights:
    """Combination weights from component densities on quadratic rows and labeled rows."""
    p = len(quad_grids)
    if p < 2 or len(point_grids) != p:
        raise DataError("need at least two components with matching grids")
    if any(G.shape[1] != N_GRID for G in list(quad_grids) + list(point_grids)):
        raise DataError("all components must share one grid")
    M = np.empty((p, p))
    for i in range(p):
        for j in range(i, p):
            M[i, j] = M[j, i] = float(np.mean(trapz_rows(quad_grids[i] * quad_grids[j])))
    pts = [interp_rows(G, z) for G in point_grids]
    w = np.ones(len(z)) if weights is None else np.asarray(weights, dtype=float)
    bvec = np.array([float(np.mean(w * pt)) for pt in pts])
    alpha = solve_simplex_qp(M, bvec)
    risk = float(alpha @ M @ alpha - 2.0 * bvec @ alpha)
    comp = tuple(float(M[i, i] - 2.0 * bvec[i]) for i in range(p))
    return CombWeights(alpha, risk, comp)


def fit_comb(
    estimators: Sequence,
    X: np.ndarray,
    z: np.ndarray,
    weights: np.ndarray | None = None,
    X_quadratic: np.ndarray | None = None,
) -> CombWeights:
    """Simplex weights minimizing the generalized risk of the combined density on ``(X, z)``."""
    point = [e.predict(X) for e in estimators]
    quad = point if X_quadratic is None else [e.predict(X_quadratic) for e in estimators]
    return comb_from_grids(quad, point, z, weights)


class CombEstimator:
    def __init__(self, components: Sequence[CDEstimator], weights: CombWeights):
        self.components = list(components)
        self.weights = weights

    def predict(self, Xq: np.ndarray) -> np.ndarray:
        F = sum(a * c.predict(Xq) for a, c in zip(self.weights.alpha, self.components))
        return normalize_rows(F)

    def label(self) -> str:
        parts = "+".join(f"{a:.4g}*{c.label()}" for a, c in zip(self.weights.alpha, self.components))
        return f"comb({parts})"


@dataclass(frozen=True)
class CDESpec:
    """``kind`` is one of the single estimators or ``comb`` over ``components``."""

    kind: str
    grids: dict = field(default_factory=dict)
    components: tuple[str, ...] = ("ker_nn", "series")

    def __post_init__(self) -> None:
        if self.kind not in KINDS + ("comb",):
            raise DataError(f"unknown density estimator {self.kind!r}")
        if self.kind == "comb" and (len(self.components) < 2 or any(c not in KINDS for c in self.components)):
            raise DataError("comb needs at least two valid components")


def fit_spec(
    spec: CDESpec,
    X: np.ndarray,
    z: np.ndarray,
    folds: int,
    seed: int,
    risk_weights: np.ndarray | None = None,
    X_unlabeled: np.ndarray | None = None,
):
    """Fit a single estimator or a comb.

    Comb components share one fold assignment; their weights are fitted on
    out-of-fold densities so that no labeled row scores its own fit.
    """
    if spec.kind != "comb":
        return fit_cde(spec.kind, X, z, spec.grids.get(spec.kind), folds, risk_weights, X_unlabeled, seed)
    comps = [
        fit_cde(c, X, z, spec.grids.get(c), folds, risk_weights, X_unlabeled, seed, keep_oof=True)
        for c in spec.components
    ]
    if risk_weights is None:
        cw = comb_from_grids([c.oof for c in comps], [c.oof for c in comps], z)
    else:
        quad = [c.predict(X_unlabeled) for c in comps]
        cw = comb_from_grids(quad, [c.oof for c in comps], z, risk_weights)
    return CombEstimator(comps, cw)


@dataclass
class CDEResult:
    """Densities for target rows (rescaled response), keyed by original row index."""

    scale: ResponseScale
    target_index: np.ndarray
    densities: np.ndarray
    stratum: np.ndarray
    models: dict[int, object]

    def target_risk(self, y_target: np.ndarray) -> float:
        return float(np.mean(self.row_losses(y_target)))

    def row_losses(self, y_target: np.ndarray) -> np.ndarray:
        return target_row_losses(self.densities, self.scale.forward(y_target))

    def alphas(self) -> dict[int, np.ndarray]:
        return {j: m.weights.alpha for j, m in self.models.items() if isinstance(m, CombEstimator)}

    def to_csv(self) -> str:
        lines = ["row,grid_point,value"]
        for r, F in zip(self.target_index, self.densities):
            lines.extend(f"{r},{g!r},{v!r}" for g, v in zip(GRID.tolist(), F.tolist()))
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "grid": {"start": 0.0, "stop": 1.0, "points": N_GRID},
            "response_scale": {"lo": self.scale.lo, "hi": self.scale.hi},
            "rows": [int(r) for r in self.target_index],
            "stratum": [int(s) for s in self.stratum],
            "values": [[float(v) for v in F] for F in self.densities],
        }


def _source_scale(d: Dataset) -> ResponseScale:
    return ResponseScale.fit(d.y[d.s == 1])


def stratlearn_cde(spec: CDESpec, d: Dataset, a: StrataAssignment, folds: int = 5, seed: int = 0) -> CDEResult:
    """Fit unweighted estimators per stratum on its merged source pool; predict its target rows."""
    d.require_both_domains()
    scale = _source_scale(d)
    z_all = np.where(d.s == 1, scale.forward(np.nan_to_num(d.y)), 0.0)
    idx, dens, strat, models = [], [], [], {}
    for j in range(1, a.k + 1):
        tgt = np.flatnonzero((a.stratum_of == j) & (d.s == 0))
        if tgt.size == 0:
            continue
        train = a.training_rows(j, d.s)
        nf = min(folds, train.size)
        if nf < 2:
            raise DataError(f"stratum {j} has {train.size} source rows; cannot cross-validate")
        model = fit_spec(spec, d.X[train], z_all[train], nf, task_seed(seed, j))
        models[j] = model
        idx.append(tgt)
        dens.append(model.predict(d.X[tgt]))
        strat.append(np.full(tgt.size, j))
    return _assemble(scale, idx, dens, strat, models)


def biased_cde(spec: CDESpec, d: Dataset, folds: int = 5, seed: int = 0) -> CDEResult:
    """Single unweighted fit on all source rows."""
    a = StrataAssignment(1, np.empty(0), np.ones(d.n, dtype=np.int64))
    return stratlearn_cde(spec, d, a, folds, seed)


def weighted_cde(spec: CDESpec, d: Dataset, w: np.ndarray, folds: int = 5, seed: int = 0) -> CDEResult:
    """Fit on all source rows selecting by the importance-weighted generalized risk."""
    d.require_both_domains()
    scale = _source_scale(d)
    src, tgt = np.flatnonzero(d.s == 1), np.flatnonzero(d.s == 0)
    w = np.asarray(w, dtype=float)
    if w.shape != src.shape:
        raise DataError("need one weight per source row")
    model = fit_spec(spec, d.X[src], scale.forward(d.y[src]), folds, task_seed(seed, 1), w, d.X[tgt])
    return _assemble(scale, [tgt], [model.predict(d.X[tgt])], [np.ones(tgt.size, dtype=np.int64)], {1: model})


def _assemble(scale, idx, dens, strat, models) -> CDEResult:
    ti = np.concatenate(idx)
    order = np.argsort(ti, kind="stable")
    return CDEResult(scale, ti[order], np.concatenate(dens)[order], np.concatenate(strat)[order], models)
