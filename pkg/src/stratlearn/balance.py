"""Within-stratum balance diagnostics: SMD, Kolmogorov-Smirnov, Fisher's exact test."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from stratlearn.strata import StrataAssignment
from stratlearn.tabular import Dataset

MIN_PER_SIDE = 20


def smd(source_col: np.ndarray, target_col: np.ndarray) -> float:
    """Absolute standardized mean difference with the pooled-variance denominator.

    ``|mean_S - mean_T| / sqrt((var_S + var_T) / 2)`` using n-1 variances.
    Returns 0 for equal means with zero variance and ``inf`` for unequal ones.
    """
    a = np.asarray(source_col, dtype=float)
    b = np.asarray(target_col, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("SMD needs at least two values per side (sample variance undefined)")
    diff = abs(a.mean() - b.mean())
    pooled = (a.var(ddof=1) + b.var(ddof=1)) / 2.0
    if pooled <= 0:
        return 0.0 if diff == 0 else math.inf
    return float(diff / math.sqrt(pooled))


def ks_statistic(source_col: np.ndarray, target_col: np.ndarray) -> float:
    """Two-sample KS statistic: max |ECDF_S - ECDF_T| over the pooled sample points."""
    a = np.sort(np.asarray(source_col, dtype=float))
    b = np.sort(np.asarray(target_col, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("KS statistic needs nonempty samples")
    pts = np.concatenate([a, b])
    fa = np.searchsorted(a, pts, side="right") / a.size
    fb = np.searchsorted(b, pts, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def _log_hyper(x: int, r1: int, r2: int, c1: int) -> float:
    """log P(top-left = x) for a 2x2 table with row sums r1, r2 and first column sum c1."""
    lf = math.lgamma
    return (
        lf(r1 + 1) - lf(x + 1) - lf(r1 - x + 1)
        + lf(r2 + 1) - lf(c1 - x + 1) - lf(r2 - c1 + x + 1)
        - (lf(r1 + r2 + 1) - lf(c1 + 1) - lf(r1 + r2 - c1 + 1))
    )


def fisher_exact_2x2(a: int, b: int, c: int, d: int) -> float:
    """Two-sided Fisher exact p-value for the table ``[[a, b], [c, d]]``.

    Sums the hypergeometric probabilities of all tables with the observed
    margins that are no more probable than the observed one (relative
    tolerance 1e-7 for ties).
    """
    counts = (a, b, c, d)
    if any(int(v) != v or v < 0 for v in counts):
        raise ValueError("table entries must be nonnegative integers")
    a, b, c, d = (int(v) for v in counts)
    if a + b + c + d == 0:
        raise ValueError("all-zero table")
    r1, r2, c1 = a + b, c + d, a + c
    lo, hi = max(0, c1 - r2), min(r1, c1)
    logp = np.array([_log_hyper(x, r1, r2, c1) for x in range(lo, hi + 1)])
    obs = _log_hyper(a, r1, r2, c1)
    keep = logp <= obs + math.log1p(1e-7)
    # factor out the largest term for a stable sum
    m = logp[keep].max()
    p = math.exp(m) * float(np.sum(np.exp(logp[keep] - m)))
    return min(1.0, p)


@dataclass(frozen=True)
class StratumBalance:
    stratum: int
    n_source: int
    n_target: int
    sufficient: bool
    smd: np.ndarray | None = None
    ks: np.ndarray | None = None

    def aggregate(self) -> dict:
        if not self.sufficient:
            return {"mean_smd": None, "sd_smd": None, "mean_ks": None, "sd_ks": None}
        return _aggregate(self.smd, self.ks)


def _aggregate(smd_v: np.ndarray, ks_v: np.ndarray) -> dict:
    ddof = 1 if smd_v.size > 1 else 0
    return {
        "mean_smd": float(np.mean(smd_v)),
        "sd_smd": float(np.std(smd_v, ddof=ddof)),
        "mean_ks": float(np.mean(ks_v)),
        "sd_ks": float(np.std(ks_v, ddof=ddof)),
    }


@dataclass(frozen=True)
class BalanceReport:
    covariates: tuple[str, ...]
    raw_smd: np.ndarray
    raw_ks: np.ndarray
    strata: tuple[StratumBalance, ...] = field(default=())

    def raw_aggregate(self) -> dict:
        return _aggregate(self.raw_smd, self.raw_ks)

    def mean_within_smd(self) -> float:
        """Mean SMD over covariates, averaged over strata with enough rows per side."""
        vals = [float(np.mean(sb.smd)) for sb in self.strata if sb.sufficient]
        return float(np.mean(vals)) if vals else math.nan

    def smd_ratio(self, stratum: int) -> float:
        """Ratio of average SMD in ``stratum`` to the raw average SMD."""
        sb = self.strata[stratum - 1]
        if not sb.sufficient:
            return math.nan
        return float(np.mean(sb.smd) / np.mean(self.raw_smd))

    def long_rows(self) -> list[dict]:
        rows = [
            {"stratum": "raw", "covariate": c, "smd": float(s), "ks": float(k)}
            for c, s, k in zip(self.covariates, self.raw_smd, self.raw_ks)
        ]
        for sb in self.strata:
            for i, c in enumerate(self.covariates):
                if sb.sufficient:
                    rows.append({"stratum": sb.stratum, "covariate": c, "smd": float(sb.smd[i]), "ks": float(sb.ks[i])})
                else:
                    rows.append({"stratum": sb.stratum, "covariate": c, "smd": "insufficient data", "ks": "insufficient data"})
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["stratum", "covariate", "smd", "ks"], lineterminator="\n")
        w.writeheader()
        for r in self.long_rows():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def scatter_csv(self) -> str:
        """Raw SMD against within-stratum SMD per covariate, one column per reportable stratum."""
        usable = [sb for sb in self.strata if sb.sufficient]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["covariate", "raw_smd"] + [f"stratum{sb.stratum}_smd" for sb in usable])
        for i, c in enumerate(self.covariates):
            w.writerow([c, repr(float(self.raw_smd[i]))] + [repr(float(sb.smd[i])) for sb in usable])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "raw": self.raw_aggregate(),
            "strata": [
                {"stratum": sb.stratum, "n_source": sb.n_source, "n_target": sb.n_target,
                 "sufficient": sb.sufficient, **sb.aggregate()}
                for sb in self.strata
            ],
            "mean_within_smd": self.mean_within_smd(),
        }

    def to_json(self) -> str:
        return json.dumps(_finite_or_none(self.summary()), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _finite_or_none(obj):
    if isinstance(obj, dict):
        return {k: _finite_or_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite_or_none(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _columns_balance(XS: np.ndarray, XT: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    F = XS.shape[1]
    return (
        np.array([smd(XS[:, j], XT[:, j]) for j in range(F)]),
        np.array([ks_statistic(XS[:, j], XT[:, j]) for j in range(F)]),
    )


def balance_report(d: Dataset, a: StrataAssignment, min_per_side: int = MIN_PER_SIDE) -> BalanceReport:
    """SMD and KS per covariate, on the raw data and within each stratum.

    Strata with fewer than ``min_per_side`` source or target rows are marked
    insufficient and carry no statistics.
    """
    src, tgt = d.s == 1, d.s == 0
    raw_smd, raw_ks = _columns_balance(d.X[src], d.X[tgt])
    strata = []
    for j in range(1, a.k + 1):
        in_j = a.stratum_of == j
        ns, nt = int(np.sum(in_j & src)), int(np.sum(in_j & tgt))
        if ns >= max(min_per_side, 2) and nt >= max(min_per_side, 2):
            sm, ks = _columns_balance(d.X[in_j & src], d.X[in_j & tgt])
            strata.append(StratumBalance(j, ns, nt, True, sm, ks))
        else:
            strata.append(StratumBalance(j, ns, nt, False))
    return BalanceReport(d.column_names, raw_smd, raw_ks, tuple(strata))


@dataclass(frozen=True)
class OutcomeBalance:
    stratum: int
    n_source: int
    n_target: int
    positive_source: int
    positive_target: int
    prop_source: float | None
    prop_target: float | None
    p_value: float | None
    note: str = ""


def predicted_outcome_balance(
    per_stratum: dict[int, tuple[np.ndarray, np.ndarray]],
    threshold: float = 0.5,
) -> list[OutcomeBalance]:
    """Compare thresholded predictions between source and target within each stratum.

    ``per_stratum`` maps a stratum index to ``(pred_source, pred_target)``
    predicted probabilities. A prediction counts as positive when it is
    strictly above ``threshold``; the two sides are compared with
    :func:`fisher_exact_2x2`.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    out = []
    for j in sorted(per_stratum):
        ps, pt = (np.asarray(v, dtype=float) for v in per_stratum[j])
        ns, nt = ps.size, pt.size
        pos_s, pos_t = int(np.sum(ps > threshold)), int(np.sum(pt > threshold))
        if ns == 0 or nt == 0:
            out.append(OutcomeBalance(j, ns, nt, pos_s, pos_t,
                                      pos_s / ns if ns else None, pos_t / nt if nt else None,
                                      None, "empty side; no test"))
            continue
        p = fisher_exact_2x2(pos_s, ns - pos_s, pos_t, nt - pos_t)
        out.append(OutcomeBalance(j, ns, nt, pos_s, pos_t, pos_s / ns, pos_t / nt, p))
    return out
