"""Dataset container, CSV ingestion, standardization and simulated covariate shift."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from stratlearn.errors import DataError


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Covariates, optional labels and a source/target indicator for ``n`` rows.

    ``s[i] == 1`` marks a labeled source row, ``s[i] == 0`` a target row.
    Missing labels are carried by ``y_observed``; the corresponding ``y``
    entries are NaN and must not be read.
    """

    X: np.ndarray
    s: np.ndarray
    column_names: tuple[str, ...]
    y: np.ndarray | None = None
    y_observed: np.ndarray | None = None
    label_name: str | None = None

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2:
            raise DataError(f"X must be 2-D, got shape {X.shape}")
        n, F = X.shape
        if n < 1 or F < 1:
            raise DataError(f"dataset needs n >= 1 and F >= 1, got {X.shape}")
        if not np.all(np.isfinite(X)):
            bad = np.flatnonzero(~np.all(np.isfinite(X), axis=1))
            raise DataError(f"non-finite covariates in rows {bad[:10].tolist()}")
        s = np.asarray(self.s)
        if s.shape != (n,):
            raise DataError(f"indicator length {s.shape} does not match n={n}")
        if not np.all((s == 0) | (s == 1)):
            raise DataError("indicator must contain only 0 and 1")
        names = tuple(str(c) for c in self.column_names)
        if len(names) != F:
            raise DataError(f"{len(names)} column names for {F} covariates")
        if len(set(names)) != F:
            raise DataError("duplicate covariate names")

        y = self.y
        obs = self.y_observed
        if y is not None:
            y = np.asarray(y, dtype=float)
            if y.shape != (n,):
                raise DataError(f"label length {y.shape} does not match n={n}")
            if obs is None:
                obs = ~np.isnan(y)
            obs = np.asarray(obs, dtype=bool)
            if obs.shape != (n,):
                raise DataError("y_observed must have length n")
            y = np.where(obs, y, np.nan)
            if np.any(~np.isfinite(y[obs])):
                raise DataError("observed labels must be finite")
            missing_src = np.flatnonzero((s == 1) & ~obs)
            if missing_src.size:
                raise DataError(f"source rows without labels: {missing_src[:10].tolist()}")
        elif obs is not None:
            raise DataError("y_observed given without y")

        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "s", _frozen(s.astype(np.int8)))
        object.__setattr__(self, "column_names", names)
        object.__setattr__(self, "y", None if y is None else _frozen(y))
        object.__setattr__(self, "y_observed", None if obs is None else _frozen(obs))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def source(self) -> np.ndarray:
        return self.s == 1

    @property
    def target(self) -> np.ndarray:
        return self.s == 0

    @property
    def n_source(self) -> int:
        return int(np.sum(self.s == 1))

    @property
    def n_target(self) -> int:
        return int(np.sum(self.s == 0))

    @property
    def target_labeled(self) -> bool:
        """True when every target row carries a label (simulation setting)."""
        return self.y is not None and bool(np.all(self.y_observed[self.s == 0]))

    def require_both_domains(self) -> None:
        if self.n_source == 0 or self.n_target == 0:
            raise DataError(
                f"need both source and target rows (n_source={self.n_source}, n_target={self.n_target})"
            )

    def with_indicator(self, s: np.ndarray) -> Dataset:
        return replace(self, s=np.asarray(s))

    def with_covariates(self, X: np.ndarray, column_names: Sequence[str] | None = None) -> Dataset:
        return replace(self, X=X, column_names=tuple(column_names or self.column_names))

    def subset(self, rows: np.ndarray) -> Dataset:
        rows = np.asarray(rows)
        return Dataset(
            X=self.X[rows],
            s=self.s[rows],
            column_names=self.column_names,
            y=None if self.y is None else self.y[rows],
            y_observed=None if self.y_observed is None else self.y_observed[rows],
            label_name=self.label_name,
        )


@dataclass(frozen=True)
class ShiftSpec:
    """Beta-density rejection shift applied to one covariate."""

    beta_a: float
    beta_b: float
    shift_column: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if not (self.beta_a > 0 and self.beta_b > 0):
            raise DataError(f"beta parameters must be positive, got ({self.beta_a}, {self.beta_b})")


# Named scenarios: weak / medium / strong shift.
SHIFT_SCENARIOS = {"weak": (9.0, 4.0), "medium": (13.0, 4.0), "strong": (18.0, 4.0)}


def _parse_float(cell: str, row: int, column: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"row {row}, column {column!r}: non-numeric value {cell!r}") from None


def load_csv(
    path: str | Path,
    label_column: str | None = None,
    indicator_column: str | None = None,
) -> Dataset:
    """Read a headed CSV into a :class:`Dataset`.

    Every column other than the label and indicator is a covariate. An empty
    label cell marks a missing label. Without an indicator column, rows with
    an observed label are source rows and the rest are target rows.
    Rows are numbered from 1, excluding the header.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if any(c.strip() for c in r)]

    dupes = sorted({h for h in header if header.count(h) > 1})
    if dupes:
        raise DataError(f"{path}: duplicate column names {dupes}")
    for role, name in (("label", label_column), ("indicator", indicator_column)):
        if name is not None and name not in header:
            raise DataError(f"{path}: {role} column {name!r} not in header")
    cov_idx = [i for i, h in enumerate(header) if h not in (label_column, indicator_column)]
    if not cov_idx:
        raise DataError(f"{path}: no covariate columns")
    if not rows:
        raise DataError(f"{path}: no data rows")

    n = len(rows)
    X = np.empty((n, len(cov_idx)))
    y = np.full(n, np.nan) if label_column else None
    obs = np.zeros(n, dtype=bool) if label_column else None
    s = np.ones(n, dtype=np.int8)
    nonfinite: list[str] = []
    li = header.index(label_column) if label_column else None
    si = header.index(indicator_column) if indicator_column else None

    for r, cells in enumerate(rows, start=1):
        if len(cells) != len(header):
            raise DataError(f"row {r}: expected {len(header)} fields, got {len(cells)}")
        cells = [c.strip() for c in cells]
        for j, ci in enumerate(cov_idx):
            v = _parse_float(cells[ci], r, header[ci])
            if not math.isfinite(v):
                nonfinite.append(f"row {r}, column {header[ci]!r}: {cells[ci]!r}")
            X[r - 1, j] = v
        if li is not None and cells[li] != "":
            v = _parse_float(cells[li], r, label_column)
            if not math.isfinite(v):
                raise DataError(f"row {r}, column {label_column!r}: non-finite label {cells[li]!r}")
            y[r - 1] = v
            obs[r - 1] = True
        if si is not None:
            v = cells[si]
            if v not in ("0", "1", "0.0", "1.0"):
                raise DataError(f"row {r}, column {indicator_column!r}: indicator must be 0 or 1, got {v!r}")
            s[r - 1] = int(float(v))
        elif obs is not None:
            s[r - 1] = 1 if obs[r - 1] else 0

    if nonfinite:
        raise DataError("rejected non-finite covariates:\n  " + "\n  ".join(nonfinite))
    return Dataset(
        X=X,
        s=s,
        column_names=tuple(header[i] for i in cov_idx),
        y=y,
        y_observed=obs,
        label_name=label_column,
    )


def save_csv(d: Dataset, path: str | Path, indicator_name: str = "s") -> None:
    """Write ``d`` in the format :func:`load_csv` reads (missing labels as empty cells)."""
    header = list(d.column_names)
    if d.y is not None:
        header.append(d.label_name or "y")
    header.append(indicator_name)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(d.n):
            row = [repr(float(v)) for v in d.X[i]]
            if d.y is not None:
                row.append(repr(float(d.y[i])) if d.y_observed[i] else "")
            row.append(str(int(d.s[i])))
            w.writerow(row)


@dataclass(frozen=True)
class Standardization:
    """Per-column centering/scaling learned from one dataset.

    Constant columns are recorded with mean 0 and scale 1 (identity) and
    flagged, so applying the record leaves them untouched.
    """

    columns: tuple[str, ...]
    mean: tuple[float, ...]
    scale: tuple[float, ...]
    flagged: tuple[bool, ...] = field(default=())

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.columns):
            raise DataError(f"expected {len(self.columns)} columns, got shape {X.shape}")
        return (X - np.asarray(self.mean)) / np.asarray(self.scale)

    def to_text(self) -> str:
        lines = [f"columns = {','.join(self.columns)}"]
        for c, m, sc, fl in zip(self.columns, self.mean, self.scale, self.flagged):
            lines.append(f"{c}.mean = {m!r}")
            lines.append(f"{c}.scale = {sc!r}")
            lines.append(f"{c}.flagged = {'true' if fl else 'false'}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> Standardization:
        kv = {}
        for line in text.splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                kv[k.strip()] = v.strip()
        cols = tuple(kv["columns"].split(","))
        return cls(
            columns=cols,
            mean=tuple(float(kv[f"{c}.mean"]) for c in cols),
            scale=tuple(float(kv[f"{c}.scale"]) for c in cols),
            flagged=tuple(kv[f"{c}.flagged"] == "true" for c in cols),
        )


def standardize(d: Dataset) -> tuple[Dataset, Standardization]:
    """Center and scale every covariate to sample mean 0 and sample SD 1.

    Statistics are pooled over source and target rows. Zero-variance columns
    (and every column when n == 1) are passed through and flagged.
    """
    if d.n == 0:
        raise DataError("cannot standardize an empty dataset")
    X = d.X
    mean = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1) if d.n > 1 else np.zeros(d.n_features)
    flagged = ~(sd > 0) | ~np.isfinite(sd)
    mean = np.where(flagged, 0.0, mean)
    scale = np.where(flagged, 1.0, sd)
    rec = Standardization(
        columns=d.column_names,
        mean=tuple(float(v) for v in mean),
        scale=tuple(float(v) for v in scale),
        flagged=tuple(bool(f) for f in flagged),
    )
    return d.with_covariates(rec.apply(X)), rec


def beta_acceptance(u: np.ndarray, a: float, b: float) -> np.ndarray:
    """Acceptance probability ``f_Beta(a,b)(u) / max f_Beta(a,b)`` for ``u`` in [0, 1].

    The maximum is analytic whenever the density is bounded (a >= 1 and
    b >= 1). For unbounded densities the maximum over the supplied points is
    used, after nudging ``u`` off the singular endpoints.
    """
    if not (a > 0 and b > 0):
        raise DataError(f"beta parameters must be positive, got ({a}, {b})")
    u = np.asarray(u, dtype=float)
    if a > 1 and b > 1:
        fmax = stats.beta.pdf((a - 1) / (a + b - 2), a, b)
        return np.clip(stats.beta.pdf(u, a, b) / fmax, 0.0, 1.0)
    if a == 1 and b == 1:
        return np.ones_like(u)
    if a >= 1 and b >= 1:
        # a == 1 < b peaks at 0, b == 1 < a peaks at 1
        fmax = stats.beta.pdf(0.0 if a == 1 else 1.0, a, b)
        return np.clip(stats.beta.pdf(u, a, b) / fmax, 0.0, 1.0)
    tiny = 1e-12
    f = stats.beta.pdf(np.clip(u, tiny, 1 - tiny), a, b)
    return f / f.max()


def simulate_shift(d: Dataset, spec: ShiftSpec) -> Dataset:
    """Split a fully labeled dataset into source and target by beta rejection sampling.

    The shift column is min-max rescaled to [0, 1]; each row becomes a target
    row with probability :func:`beta_acceptance` at its rescaled value.
    Row order, covariates and labels are unchanged.
    """
    if d.n < 2:
        raise DataError("shift simulation needs at least 2 rows")
    if not 0 <= spec.shift_column < d.n_features:
        raise DataError(f"shift_column {spec.shift_column} out of range for {d.n_features} covariates")
    if d.y is None or not np.all(d.y_observed):
        raise DataError("shift simulation needs every row labeled")
    col = d.X[:, spec.shift_column]
    lo, hi = col.min(), col.max()
    if hi == lo:
        raise DataError(f"shift column {d.column_names[spec.shift_column]!r} is constant")
    u = (col - lo) / (hi - lo)
    p_target = beta_acceptance(u, spec.beta_a, spec.beta_b)
    rng = np.random.default_rng(spec.seed)
    s = np.where(rng.random(d.n) < p_target, 0, 1)
    return d.with_indicator(s)
