"""Target-side metrics: AUC/ROC, MSE, log-loss and bootstrap standard errors."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from stratlearn.errors import DataError
from stratlearn.learn import LOGLOSS_EPS

log = logging.getLogger(__name__)

DEFAULT_N_BOOT = 400
MAX_REDRAWS = 10
METRICS = ("auc", "mse", "logloss", "cde_target_risk")


def _binary(labels) -> np.ndarray:
    y = np.asarray(labels, dtype=float)
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0/1")
    return y


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    s = np.asarray(scores, dtype=float)
    y = _binary(labels)
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise DataError("AUC needs both classes")
    r = rankdata(s)
    return float((r[y == 1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """(fpr, tpr) at every distinct threshold, from (0, 0) to (1, 1)."""
    s = np.asarray(scores, dtype=float)
    y = _binary(labels)
    n1 = y.sum()
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise DataError("ROC needs both classes")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]  # end of each tie block
    tp = np.cumsum(y)[last]
    fp = np.cumsum(1 - y)[last]
    pts = [(0.0, 0.0)] + [(float(f / n0), float(t / n1)) for f, t in zip(fp, tp)]
    return pts


def roc_area(points) -> float:
    f = np.array([p[0] for p in points])
    t = np.array([p[1] for p in points])
    return float(np.sum(np.diff(f) * (t[1:] + t[:-1]) / 2.0))


def mse(pred, y) -> float:
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(y, dtype=float)
    if pred.shape != y.shape:
        raise DataError("prediction and label lengths differ")
    return float(np.mean((pred - y) ** 2))


def logloss(prob, y) -> float:
    p = np.clip(np.asarray(prob, dtype=float), LOGLOSS_EPS, 1 - LOGLOSS_EPS)
    y = _binary(y)
    if p.shape != y.shape:
        raise DataError("prediction and label lengths differ")
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def _metric_fn(metric: str | Callable) -> tuple[Callable, bool]:
    """Metric callable ``(scores, labels) -> float`` and whether it needs both classes."""
    if callable(metric):
        return metric, False
    if metric == "auc":
        return auc, True
    if metric == "mse":
        return mse, False
    if metric == "logloss":
        return logloss, False
    if metric in ("cde_target_risk", "mean"):
        # scores are per-row risk contributions
        return (lambda s, _y: float(np.mean(s))), False
    raise DataError(f"unknown metric {metric!r}")


@dataclass(frozen=True)
class BootstrapResult:
    se: float
    replicates: np.ndarray
    n_boot: int
    skipped: int


def _bootstrap(stat: Callable[[np.ndarray], float], n: int, labels, needs_both: bool,
               n_boot: int, seed: int) -> BootstrapResult:
    if n_boot < 2:
        raise DataError("n_boot must be >= 2")
    y = None if labels is None else np.asarray(labels)
    reps, skipped = [], 0
    for b in range(n_boot):
        rng = np.random.default_rng([seed, b])
        for _ in range(MAX_REDRAWS + 1):
            idx = rng.integers(0, n, size=n)
            if not needs_both or np.unique(y[idx]).size == 2:
                reps.append(stat(idx))
                break
        else:
            skipped += 1
    if skipped:
        log.warning("%d of %d bootstrap replicates skipped (single class)", skipped, n_boot)
    if len(reps) < 2:
        raise DataError("metric undefined on (almost) every bootstrap resample")
    r = np.array(reps)
    return BootstrapResult(float(np.std(r, ddof=1)), r, n_boot, skipped)


def bootstrap(metric, scores, labels, n_boot: int = DEFAULT_N_BOOT, seed: int = 0) -> BootstrapResult:
    """Resample rows with replacement; replicate ``b`` uses ``default_rng([seed, b])``.

    Resamples that lose a class (for AUC) are redrawn up to 10 times, then skipped.
    """
    fn, needs_both = _metric_fn(metric)
    s = np.asarray(scores, dtype=float)
    y = None if labels is None else np.asarray(labels, dtype=float)
    return _bootstrap(lambda i: fn(s[i], None if y is None else y[i]), s.shape[0], y, needs_both, n_boot, seed)


def bootstrap_se(metric, scores, labels, n_boot: int = DEFAULT_N_BOOT, seed: int = 0) -> float:
    """Standard deviation (n-1) of the metric over seeded bootstrap resamples."""
    return bootstrap(metric, scores, labels, n_boot, seed).se


def paired_bootstrap(metric, scores_a, scores_b, labels, n_boot: int = DEFAULT_N_BOOT, seed: int = 0) -> BootstrapResult:
    """Bootstrap of ``metric(a) - metric(b)`` with both methods scored on the same resampled rows."""
    fn, needs_both = _metric_fn(metric)
    a = np.asarray(scores_a, dtype=float)
    b = np.asarray(scores_b, dtype=float)
    if a.shape != b.shape:
        raise DataError("paired scores must cover the same rows")
    y = None if labels is None else np.asarray(labels, dtype=float)

    def stat(i):
        yi = None if y is None else y[i]
        return fn(a[i], yi) - fn(b[i], yi)

    return _bootstrap(stat, a.shape[0], y, needs_both, n_boot, seed)


def paired_bootstrap_se(metric, scores_a, scores_b, labels, n_boot: int = DEFAULT_N_BOOT, seed: int = 0) -> float:
    return paired_bootstrap(metric, scores_a, scores_b, labels, n_boot, seed).se


@dataclass(frozen=True)
class EvalReport:
    metric: str
    value: float
    bootstrap_se: float
    n_boot: int
    n: int
    roc_points: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self) -> None:
        if self.metric not in METRICS:
            raise DataError(f"unknown metric {self.metric!r}")
        if self.metric == "auc" and not 0.0 <= self.value <= 1.0:
            raise DataError("AUC outside [0, 1]")
        if self.bootstrap_se < 0:
            raise DataError("negative standard error")

    def to_dict(self) -> dict:
        out = {"metric": self.metric, "value": self.value, "bootstrap_se": self.bootstrap_se,
               "n_boot": self.n_boot, "n": self.n}
        if self.roc_points is not None:
            out["roc_points"] = [list(p) for p in self.roc_points]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def roc_csv(points) -> str:
    return "fpr,tpr\n" + "".join(f"{f!r},{t!r}\n" for f, t in points)


def evaluate(metric: str, scores, labels, n_boot: int = DEFAULT_N_BOOT, seed: int = 0) -> EvalReport:
    """Metric value with its bootstrap SE; ``scores`` are per-row losses for ``cde_target_risk``."""
    fn, _ = _metric_fn(metric)
    s = np.asarray(scores, dtype=float)
    y = None if labels is None else np.asarray(labels, dtype=float)
    value = fn(s, y)
    se = bootstrap_se(metric, s, y, n_boot, seed)
    roc = tuple(roc_curve(s, y)) if metric == "auc" else None
    return EvalReport(metric, value, se, n_boot, int(s.shape[0]), roc)
