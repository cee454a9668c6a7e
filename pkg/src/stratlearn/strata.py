"""Quantile stratification on propensity scores.

Stratum 1 holds the highest scores: with interior quantiles ``q_1..q_{k-1}``
and ``q_0 = 0``, ``q_k = 1``, stratum ``j`` covers ``(q_{k-j}, q_{k-j+1}]``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from stratlearn.errors import DataError, DegenerateStrataError
from stratlearn.tabular import Dataset

log = logging.getLogger(__name__)

DEFAULT_K = 5
DEFAULT_MIN_SOURCE = 40


@dataclass(frozen=True)
class StrataAssignment:
    k: int
    boundaries: np.ndarray  # ascending interior quantiles, length k - 1
    stratum_of: np.ndarray  # values in 1..k
    merge_map: dict[int, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.merge_map:
            object.__setattr__(self, "merge_map", {j: (j,) for j in range(1, self.k + 1)})

    def rows(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.stratum_of == j)

    def training_rows(self, j: int, s: np.ndarray) -> np.ndarray:
        """Source rows whose data train the model for stratum ``j`` (ascending row order)."""
        in_pool = np.isin(self.stratum_of, self.merge_map[j])
        return np.flatnonzero(in_pool & (np.asarray(s) == 1))

    def counts(self, s: np.ndarray) -> list[tuple[int, int]]:
        s = np.asarray(s)
        return [
            (int(np.sum((self.stratum_of == j) & (s == 1))), int(np.sum((self.stratum_of == j) & (s == 0))))
            for j in range(1, self.k + 1)
        ]


def quantile_boundaries(scores: np.ndarray, k: int) -> np.ndarray:
    """Interior ``j/k`` quantiles by the inverse empirical CDF (smallest x with ECDF(x) >= j/k)."""
    srt = np.sort(np.asarray(scores, dtype=float))
    n = srt.size
    idx = [-(-j * n // k) - 1 for j in range(1, k)]
    return srt[idx]


def assign_strata(scores: np.ndarray, boundaries: np.ndarray) -> np.ndarray:
    """Map scores to stratum indices using the half-open intervals ``(q_{m}, q_{m+1}]``."""
    k = len(boundaries) + 1
    # m = number of interior boundaries strictly below the score
    m = np.searchsorted(boundaries, scores, side="left")
    return (k - m).astype(np.int64)


def stratify(scores: np.ndarray, s: np.ndarray, k: int = DEFAULT_K) -> StrataAssignment:
    """Split pooled source and target rows into ``k`` propensity-score strata.

    ``k = 1`` yields a single stratum (the unadjusted fit).
    """
    scores = np.asarray(scores, dtype=float)
    s = np.asarray(s)
    if scores.ndim != 1 or s.shape != scores.shape:
        raise DataError("scores and indicator must be 1-D of equal length")
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if scores.size < k:
        raise DataError(f"need at least k={k} rows, got {scores.size}")
    if np.any((scores <= 0) | (scores >= 1)):
        raise DataError("propensity scores must lie strictly inside (0, 1)")
    n_distinct = np.unique(scores).size
    if n_distinct < k:
        raise DegenerateStrataError(f"degenerate stratification: {n_distinct} distinct scores for k={k}")
    b = quantile_boundaries(scores, k)
    return StrataAssignment(k=k, boundaries=b, stratum_of=assign_strata(scores, b))


def merge_small_strata(a: StrataAssignment, s: np.ndarray, min_source: int = DEFAULT_MIN_SOURCE) -> StrataAssignment:
    """Extend training pools of source-poor strata toward stratum 1.

    Stratum ``j`` with fewer than ``min_source`` source rows borrows
    ``j-1, j-2, ...`` until the pooled count reaches ``min_source`` or stratum 1
    is included. Only training pools change; ``stratum_of`` is untouched.
    """
    s = np.asarray(s)
    if min_source < 1:
        raise DataError("min_source must be >= 1")
    n_src_total = int(np.sum(s == 1))
    if n_src_total < min_source:
        raise DataError(f"only {n_src_total} source rows in total, fewer than min_source={min_source}")
    counts = a.counts(s)
    merge_map: dict[int, tuple[int, ...]] = {}
    for j in range(1, a.k + 1):
        pool = [j]
        total = counts[j - 1][0]
        nxt = j - 1
        while total < min_source and nxt >= 1:
            pool.append(nxt)
            total += counts[nxt - 1][0]
            nxt -= 1
        if total == 0 and counts[j - 1][1] > 0:
            raise DataError(
                f"stratum {j} has target rows but no source rows even after merging up to stratum 1"
            )
        if total < min_source:
            log.warning("stratum %d trains on only %d source rows (min_source=%d)", j, total, min_source)
        merge_map[j] = tuple(pool)
    return replace(a, merge_map=merge_map)


def strata_report(a: StrataAssignment, d: Dataset) -> list[dict]:
    """Per-stratum counts and label summaries.

    Label means (class proportions for 0/1 labels) are None where labels are
    unavailable, e.g. for unlabeled target rows.
    """
    rows = []
    for j in range(1, a.k + 1):
        in_j = a.stratum_of == j
        src = in_j & (d.s == 1)
        tgt = in_j & (d.s == 0)
        rec = {
            "stratum": j,
            "n_source": int(src.sum()),
            "n_target": int(tgt.sum()),
            "train_pool": "+".join(str(m) for m in a.merge_map[j]),
            "n_train": int((np.isin(a.stratum_of, a.merge_map[j]) & (d.s == 1)).sum()),
            "source_y_mean": None,
            "target_y_mean": None,
        }
        if d.y is not None:
            if src.any():
                rec["source_y_mean"] = float(np.mean(d.y[src]))
            if tgt.any() and np.all(d.y_observed[tgt]):
                rec["target_y_mean"] = float(np.mean(d.y[tgt]))
        rows.append(rec)
    return rows


def report_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("NA" if v is None else v) for k, v in r.items()})
    return buf.getvalue()


def report_to_json(rows: list[dict]) -> str:
    return json.dumps(rows, indent=2, sort_keys=True) + "\n"
