"""Command-line interface: config-driven runs with reproducible manifests.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stratlearn import __version__
from stratlearn import balance as bal
from stratlearn import cdens, learn, metrics, synthetic
from stratlearn import strata as st
from stratlearn import weights as wts
from stratlearn.errors import ConfigError, DataError, FitFailure, StratLearnError
from stratlearn.propensity import PropensityModel, fit_propensity, predict_propensity
from stratlearn.tabular import SHIFT_SCENARIOS, Dataset, ShiftSpec, load_csv, save_csv, simulate_shift, standardize

log = logging.getLogger("stratlearn")

METHODS = ("stratlearn", "biased", "ips", "kliep", "ulsif", "nn")
WEIGHTING = ("ips", "kliep", "ulsif", "nn")
TASKS = ("regression", "classification", "cde")
EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

DEFAULT_LEARNER_GRIDS = {
    "logistic_classifier": {"ridge_lambda": [10.0, 1.0, 0.01, 1e-4, 1e-6]},
    "least_squares": {"ridge_lambda": [1e-10]},
    "knn_regressor": {"n_neighbors": [50, 20, 10, 5, 3, 1]},
}


# --------------------------------------------------------------------------- config


def _strict(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return raw


@dataclass
class LearnerConfig:
    kind: str = "least_squares"
    grid: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw, where="learner") -> LearnerConfig:
        cfg = cls(**_strict(cls, raw, where))
        if cfg.kind not in learn.KINDS:
            raise ConfigError(f"{where}.kind must be one of {learn.KINDS}, got {cfg.kind!r}")
        if not isinstance(cfg.grid, dict) or any(not isinstance(v, list) or not v for v in cfg.grid.values()):
            raise ConfigError(f"{where}.grid must map parameter names to nonempty lists")
        return cfg

    def specs(self) -> list[learn.LearnerSpec]:
        axes = {**DEFAULT_LEARNER_GRIDS[self.kind], **self.grid}
        try:
            specs = learn.grid(self.kind, **axes)
            for s in specs:
                s.build()
        except TypeError as exc:
            raise ConfigError(f"learner grid: {exc}") from None
        return specs


@dataclass
class CDEConfig:
    kind: str = "comb"
    grids: dict = field(default_factory=dict)
    components: list = field(default_factory=lambda: ["ker_nn", "series"])

    @classmethod
    def from_dict(cls, raw, where="cde") -> CDEConfig:
        cfg = cls(**_strict(cls, raw, where))
        try:
            cfg.spec()
        except DataError as exc:
            raise ConfigError(f"{where}: {exc}") from None
        for kind, axes in cfg.grids.items():
            if kind not in cdens.KINDS or not isinstance(axes, dict):
                raise ConfigError(f"{where}.grids: bad entry {kind!r}")
            allowed = set(cdens.DEFAULT_GRIDS[kind])
            if set(axes) - allowed:
                raise ConfigError(f"{where}.grids.{kind}: unknown keys {sorted(set(axes) - allowed)}")
        return cfg

    def spec(self) -> cdens.CDESpec:
        return cdens.CDESpec(self.kind, {k: dict(v) for k, v in self.grids.items()}, tuple(self.components))


@dataclass
class WeightConfig:
    n_centers: int | None = None
    sigma_grid: list | None = None
    lambda_grid: list | None = None
    k_neighbors: int = 1
    n_draws: int | None = None

    @classmethod
    def from_dict(cls, raw, where="weights") -> WeightConfig:
        return cls(**_strict(cls, raw, where))


@dataclass
class SimulateConfig:
    beta_a: float | None = None
    beta_b: float | None = None
    scenario: str | None = None
    shift_column: str | None = None
    synthetic: str | None = None
    n: int = 10_000

    @classmethod
    def from_dict(cls, raw, where="simulate") -> SimulateConfig:
        cfg = cls(**_strict(cls, raw, where))
        if cfg.scenario is not None:
            if cfg.scenario not in SHIFT_SCENARIOS:
                raise ConfigError(f"{where}.scenario must be one of {sorted(SHIFT_SCENARIOS)}")
            if cfg.beta_a is None and cfg.beta_b is None:
                cfg.beta_a, cfg.beta_b = SHIFT_SCENARIOS[cfg.scenario]
        if cfg.beta_a is None or cfg.beta_b is None:
            raise ConfigError(f"{where}: give beta_a and beta_b, or a scenario")
        if not (isinstance(cfg.beta_a, (int, float)) and isinstance(cfg.beta_b, (int, float))) \
                or cfg.beta_a <= 0 or cfg.beta_b <= 0:
            raise ConfigError(f"{where}: beta parameters must be positive numbers, got ({cfg.beta_a}, {cfg.beta_b})")
        if cfg.synthetic is not None and cfg.synthetic not in TASKS:
            raise ConfigError(f"{where}.synthetic must be one of {TASKS}")
        return cfg


@dataclass
class RunConfig:
    input: str | None = None
    label_column: str | None = "y"
    indicator_column: str | None = "s"
    task: str = "regression"
    method: str = "stratlearn"
    mode: str | None = None
    name: str | None = None
    learner: LearnerConfig | None = None
    cde: CDEConfig | None = None
    weights: WeightConfig = field(default_factory=WeightConfig)
    simulate: SimulateConfig | None = None
    standardize: bool = True
    propensity_ridge: float = 1e-6
    k: int = st.DEFAULT_K
    min_source: int = st.DEFAULT_MIN_SOURCE
    folds: int = 10
    cv_repeats: int = 1
    n_boot: int = metrics.DEFAULT_N_BOOT
    seed: int = 0
    output: str | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> RunConfig:
        raw = dict(_strict(cls, raw, "config"))
        nested = {
            "learner": LearnerConfig.from_dict,
            "cde": CDEConfig.from_dict,
            "weights": WeightConfig.from_dict,
            "simulate": SimulateConfig.from_dict,
        }
        for key, parse in nested.items():
            if raw.get(key) is not None:
                raw[key] = parse(raw[key])
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.mode is not None and self.mode not in learn.MODES:
            raise ConfigError(f"mode must be one of {learn.MODES}, got {self.mode!r}")
        if self.mode is not None and self.method not in WEIGHTING:
            raise ConfigError(f"mode applies only to weighting methods {WEIGHTING}")
        if self.task == "cde" and self.mode not in (None, "iwcv"):
            raise ConfigError("density estimation supports only mode 'iwcv' (weighted generalized risk)")
        if self.learner is None and self.task != "cde":
            self.learner = LearnerConfig("logistic_classifier" if self.task == "classification" else "least_squares")
        if self.task == "classification" and self.learner.kind != "logistic_classifier":
            raise ConfigError("classification needs learner kind 'logistic_classifier'")
        if self.task == "regression" and self.learner.kind == "logistic_classifier":
            raise ConfigError("regression needs a regression learner")
        if self.task == "cde" and self.cde is None:
            self.cde = CDEConfig()
        for key, lo in (("k", 1), ("min_source", 1), ("folds", 2), ("cv_repeats", 1), ("n_boot", 2)):
            v = getattr(self, key)
            if not isinstance(v, int) or isinstance(v, bool) or v < lo:
                raise ConfigError(f"{key} must be an integer >= {lo}, got {v!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed!r}")
        if self.learner is not None:
            self.learner.specs()

    @property
    def resolved_mode(self) -> str | None:
        if self.method not in WEIGHTING:
            return None
        return self.mode or ("iwcv" if self.task == "cde" else "weighted_erm")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return self.method if self.resolved_mode is None else f"{self.method}_{self.resolved_mode}"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path: str) -> tuple[RunConfig, str | None]:
    """Parse a config file; a run manifest is accepted too (returns its recorded input hash)."""
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    expected_hash = None
    if isinstance(raw, dict) and "manifest_version" in raw:
        expected_hash = raw.get("input_sha256")
        raw = raw.get("config")
    return RunConfig.from_dict(raw), expected_hash


# --------------------------------------------------------------------------- io helpers


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


class Outputs:
    """Writes report files and tracks their hashes for the manifest."""

    def __init__(self, root: Path):
        self.root = root
        root.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}

    def write(self, name: str, text: str) -> None:
        (self.root / name).write_text(text)
        self.files[name] = hashlib.sha256(text.encode()).hexdigest()


@contextmanager
def stage(name: str):
    """Prefix errors raised inside with the pipeline stage that produced them."""
    try:
        yield
    except StratLearnError as exc:
        raise type(exc)(f"[{name}] {exc}") from exc
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        raise FitFailure(f"[{name}] {exc}") from exc


# --------------------------------------------------------------------------- pipeline pieces


@dataclass
class Prepared:
    data: Dataset  # covariates as used for modeling
    input_sha256: str
    model: PropensityModel
    scores: np.ndarray
    assignment: st.StrataAssignment
    k_used: int
    standardization_text: str | None


def _input_path(cfg: RunConfig) -> Path:
    if not cfg.input:
        raise ConfigError("config needs an 'input' path")
    return Path(cfg.input)


def load_input(cfg: RunConfig, expected_hash: str | None = None) -> tuple[Dataset, str]:
    path = _input_path(cfg)
    with stage("load"):
        d = load_csv(path, cfg.label_column, cfg.indicator_column)
    digest = sha256_file(path)
    if expected_hash is not None and digest != expected_hash:
        raise DataError(f"[load] input {path} does not match the manifest hash")
    return d, digest


def prepare(cfg: RunConfig, expected_hash: str | None = None) -> Prepared:
    d, digest = load_input(cfg, expected_hash)
    std_text = None
    if cfg.standardize:
        with stage("standardize"):
            d, rec = standardize(d)
            std_text = rec.to_text()
    with stage("propensity"):
        m = fit_propensity(d, ridge_lambda=cfg.propensity_ridge)
        e = predict_propensity(m, d.X)
    k = 1 if cfg.method == "biased" else cfg.k
    with stage("stratify"):
        a = st.stratify(e, d.s, k)
    with stage("merge"):
        a = st.merge_small_strata(a, d.s, cfg.min_source)
    return Prepared(d, digest, m, e, a, k, std_text)


def compute_weights(cfg: RunConfig, p: Prepared) -> wts.WeightVector:
    d = p.data
    src, tgt = d.s == 1, d.s == 0
    wc = cfg.weights
    with stage("weights"):
        if cfg.method == "ips":
            return wts.ips_weights(p.scores[src], d.n_source, d.n_target)
        if cfg.method == "kliep":
            return wts.kliep_weights(d.X[src], d.X[tgt], wc.sigma_grid, wc.n_centers, seed=learn.task_seed(cfg.seed, 101))
        if cfg.method == "ulsif":
            return wts.ulsif_weights(d.X[src], d.X[tgt], wc.sigma_grid, wc.lambda_grid, wc.n_centers,
                                     seed=learn.task_seed(cfg.seed, 102))
        if cfg.method == "nn":
            return wts.nn_weights(d.X[src], d.X[tgt], wc.k_neighbors)
    raise ConfigError(f"method {cfg.method!r} has no weights")


def _write_prepared(out: Outputs, cfg: RunConfig, p: Prepared, with_strata: bool = True) -> None:
    if p.standardization_text is not None:
        out.write("standardization.txt", p.standardization_text)
    out.write("propensity_model.txt", p.model.to_text())
    if not with_strata:
        out.write("scores.csv", _csv_text(
            ["row", "s", "score"], [(i, int(p.data.s[i]), float(p.scores[i])) for i in range(p.data.n)]))
        return
    out.write("scores.csv", _csv_text(
        ["row", "s", "score", "stratum"],
        [(i, int(p.data.s[i]), float(p.scores[i]), int(p.assignment.stratum_of[i])) for i in range(p.data.n)],
    ))
    rep = st.strata_report(p.assignment, p.data)
    out.write("strata_report.csv", st.report_to_csv(rep))
    out.write("strata_report.json", st.report_to_json(rep))


def _write_balance(out: Outputs, p: Prepared) -> None:
    with stage("balance"):
        br = bal.balance_report(p.data, p.assignment)
    out.write("balance.csv", br.to_csv())
    out.write("balance_summary.json", br.to_json())
    out.write("balance_scatter.csv", br.scatter_csv())


@dataclass
class Trained:
    kind: str  # "supervised" or "cde"
    result: object
    weights: wts.WeightVector | None = None


def train(cfg: RunConfig, p: Prepared) -> Trained:
    d = p.data
    w = compute_weights(cfg, p) if cfg.method in WEIGHTING else None
    seed = cfg.seed
    with stage("train"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if cfg.task == "cde":
            spec = cfg.cde.spec()
            if cfg.method in WEIGHTING:
                res = cdens.weighted_cde(spec, d, w.w, cfg.folds, seed)
            else:
                res = cdens.stratlearn_cde(spec, d, p.assignment, cfg.folds, seed)
            return Trained("cde", res, w)
        specs = cfg.learner.specs()
        if cfg.method in WEIGHTING:
            res = learn.weighted_fit_predict(specs, d, w.w, cfg.resolved_mode, cfg.folds, seed,
                                             n_draws=cfg.weights.n_draws, repeats=cfg.cv_repeats)
        elif cfg.method == "biased":
            res = learn.biased_fit_predict(specs, d, cfg.folds, seed, repeats=cfg.cv_repeats)
        else:
            res = learn.stratlearn_fit_predict(specs, d, p.assignment, cfg.folds, seed, repeats=cfg.cv_repeats)
        return Trained("supervised", res, w)


def _write_weights(out: Outputs, d: Dataset, w: wts.WeightVector) -> None:
    src = np.flatnonzero(d.s == 1)
    out.write("weights.csv", _csv_text(["row", "weight"], [(int(i), float(v)) for i, v in zip(src, w.w)]))
    out.write("weights_summary.json", _dump_json({
        "method": w.method,
        "hyperparams": dict(sorted(w.hyperparams.items())),
        "mean": float(np.mean(w.w)), "max": float(np.max(w.w)), "min": float(np.min(w.w)),
    }))


def _write_training(out: Outputs, p: Prepared, t: Trained) -> None:
    if t.weights is not None:
        _write_weights(out, p.data, t.weights)
    r = t.result
    if t.kind == "supervised":
        lines = []
        for sf in r.strata:
            lines.append(f"[stratum {sf.stratum}] pool={'+'.join(map(str, sf.train_pool))} n_train={sf.n_train} n_target={sf.n_target}")
            if sf.model is not None:
                lines.append(sf.model.describe().rstrip("\n"))
        out.write("models.txt", "\n".join(lines) + "\n")
        out.write("cv.csv", _csv_text(["stratum", "spec", "risk", "selected"],
                                      [(c["stratum"], c["spec"], c["risk"], c["selected"]) for c in r.cv_rows()]))
    else:
        lines, cv_rows = [], []
        for j, m in sorted(r.models.items()):
            lines.append(f"[stratum {j}] {m.label()}")
            comps = m.components if isinstance(m, cdens.CombEstimator) else [m]
            for c in comps:
                for row in c.cv_table:
                    params = ";".join(f"{k}={row[k]}" for k in sorted(row) if k not in ("risk", "selected"))
                    cv_rows.append((j, c.kind, params, row["risk"], row["selected"]))
        out.write("models.txt", "\n".join(lines) + "\n")
        out.write("cv.csv", _csv_text(["stratum", "estimator", "params", "risk", "selected"], cv_rows))


def _write_predictions(out: Outputs, t: Trained) -> None:
    r = t.result
    if t.kind == "supervised":
        out.write("predictions.csv", _csv_text(
            ["row", "stratum", "prediction"],
            [(int(i), int(j), float(v)) for i, j, v in zip(r.target_index, r.stratum, r.prediction)],
        ))
        return
    means = r.scale.inverse(cdens.trapz_rows(r.densities * cdens.GRID[None, :]))
    out.write("predictions.csv", _csv_text(
        ["row", "stratum", "prediction"],
        [(int(i), int(j), float(v)) for i, j, v in zip(r.target_index, r.stratum, means)],
    ))
    out.write("densities.json", json.dumps(r.to_json_dict(), sort_keys=True) + "\n")


def _write_outcome_balance(out: Outputs, cfg: RunConfig, p: Prepared, t: Trained) -> None:
    if cfg.task != "classification" or cfg.method != "stratlearn":
        return
    r = t.result
    per = {}
    src_pos = {int(i): k for k, i in enumerate(r.source_index)}
    for j in range(1, p.assignment.k + 1):
        tsel = r.stratum == j
        if not tsel.any():
            continue
        srows = np.flatnonzero((p.assignment.stratum_of == j) & (p.data.s == 1))
        per[j] = (np.array([r.source_prediction[src_pos[int(i)]] for i in srows]), r.prediction[tsel])
    rows = bal.predicted_outcome_balance(per)
    out.write("outcome_balance.csv", _csv_text(
        ["stratum", "n_source", "n_target", "positive_source", "positive_target", "prop_source", "prop_target", "p_value", "note"],
        [(o.stratum, o.n_source, o.n_target, o.positive_source, o.positive_target,
          "NA" if o.prop_source is None else o.prop_source, "NA" if o.prop_target is None else o.prop_target,
          "NA" if o.p_value is None else o.p_value, o.note) for o in rows],
    ))


def _metric_names(task: str) -> tuple[str, ...]:
    return {"classification": ("auc", "logloss"), "regression": ("mse",), "cde": ("cde_target_risk",)}[task]


def evaluation_scores(cfg: RunConfig, d_raw: Dataset, rows: np.ndarray, preds: np.ndarray,
                      densities: dict | None) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
    """Per-metric score vectors for target rows plus labels (None for per-row-loss metrics)."""
    y = d_raw.y[rows]
    if cfg.task == "cde":
        scale = cdens.ResponseScale(densities["response_scale"]["lo"], densities["response_scale"]["hi"])
        F = np.asarray(densities["values"], dtype=float)
        return {"cde_target_risk": cdens.target_row_losses(F, scale.forward(y))}, None
    return {m: preds for m in _metric_names(cfg.task)}, y


def _evaluate(out: Outputs, cfg: RunConfig, d_raw: Dataset, rows, preds, densities) -> dict | None:
    if d_raw.y is None or not np.all(d_raw.y_observed[rows]):
        log.info("target labels unavailable; evaluation skipped")
        return None
    with stage("evaluate"):
        scores, y = evaluation_scores(cfg, d_raw, rows, preds, densities)
        reports = {m: metrics.evaluate(m, s, y, cfg.n_boot, cfg.seed) for m, s in scores.items()}
    body = {"method": cfg.label, "n_target": int(len(rows)),
            "metrics": {m: {k: v for k, v in r.to_dict().items() if k != "roc_points"} for m, r in reports.items()}}
    out.write("eval.json", _dump_json(body))
    if "auc" in reports:
        out.write("roc.csv", metrics.roc_csv(reports["auc"].roc_points))
    return body


def _manifest(out: Outputs, command: str, cfg: RunConfig, digest: str | None, extra: dict | None = None) -> None:
    body = {
        "manifest_version": 1,
        "command": command,
        "package_version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "input_sha256": digest,
        "outputs": dict(sorted(out.files.items())),
    }
    if extra:
        body.update(extra)
    if digest is not None:
        (out.root / "dataset.sha256").write_text(digest + "\n")
    (out.root / "manifest.json").write_text(_dump_json(body))


def _read_predictions(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise DataError(f"no predictions at {path}; run 'predict' first")
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([int(r["row"]) for r in rows]), np.array([float(r["prediction"]) for r in rows])


def _raw_labels(cfg: RunConfig, expected_hash=None) -> Dataset:
    return load_input(cfg, expected_hash)[0]


# --------------------------------------------------------------------------- commands


def cmd_simulate(cfg: RunConfig, out: Outputs) -> None:
    if cfg.simulate is None:
        raise ConfigError("simulate needs a 'simulate' section")
    sc = cfg.simulate
    digest = None
    if sc.synthetic is not None:
        gen = {"regression": synthetic.make_regression, "classification": synthetic.make_classification,
               "cde": lambda n, seed: synthetic.make_cde(n=n, seed=seed)}[sc.synthetic]
        with stage("simulate"):
            base = gen(n=sc.n, seed=cfg.seed)
    else:
        path = _input_path(cfg)
        with stage("load"):
            base = load_csv(path, cfg.label_column, None)
        digest = sha256_file(path)
    col = 0
    if sc.shift_column is not None:
        if sc.shift_column not in base.column_names:
            raise ConfigError(f"shift_column {sc.shift_column!r} not among covariates {list(base.column_names)}")
        col = base.column_names.index(sc.shift_column)
    with stage("simulate"):
        spec = ShiftSpec(float(sc.beta_a), float(sc.beta_b), shift_column=col, seed=cfg.seed)
        d = simulate_shift(base, spec)
    buf_path = out.root / "dataset.csv"
    save_csv(d, buf_path, indicator_name=cfg.indicator_column or "s")
    out.files["dataset.csv"] = sha256_file(buf_path)
    _manifest(out, "simulate", cfg, digest, {
        "simulation": {"beta_a": float(sc.beta_a), "beta_b": float(sc.beta_b), "shift_column": base.column_names[col],
                       "n_source": d.n_source, "n_target": d.n_target},
    })


def cmd_propensity(cfg, out, expected_hash=None):
    p = prepare(cfg, expected_hash)
    _write_prepared(out, cfg, p, with_strata=False)
    _manifest(out, "propensity", cfg, p.input_sha256)


def cmd_stratify(cfg, out, expected_hash=None):
    p = prepare(cfg, expected_hash)
    _write_prepared(out, cfg, p)
    _manifest(out, "stratify", cfg, p.input_sha256)


def cmd_weights(cfg, out, expected_hash=None):
    if cfg.method not in WEIGHTING:
        raise ConfigError(f"weights needs a weighting method {WEIGHTING}, got {cfg.method!r}")
    p = prepare(cfg, expected_hash)
    _write_weights(out, p.data, compute_weights(cfg, p))
    _manifest(out, "weights", cfg, p.input_sha256)


def cmd_balance(cfg, out, expected_hash=None):
    p = prepare(cfg, expected_hash)
    _write_balance(out, p)
    _manifest(out, "balance", cfg, p.input_sha256)


def cmd_train(cfg, out, expected_hash=None):
    p = prepare(cfg, expected_hash)
    t = train(cfg, p)
    _write_training(out, p, t)
    _manifest(out, "train", cfg, p.input_sha256)


def cmd_predict(cfg, out, expected_hash=None):
    p = prepare(cfg, expected_hash)
    t = train(cfg, p)
    _write_training(out, p, t)
    _write_predictions(out, t)
    _manifest(out, "predict", cfg, p.input_sha256)


def cmd_evaluate(cfg, out, expected_hash=None):
    d_raw, digest = load_input(cfg, expected_hash)
    rows, preds = _read_predictions(out.root / "predictions.csv")
    dens = None
    if cfg.task == "cde":
        dens = json.loads((out.root / "densities.json").read_text())
    body = _evaluate(out, cfg, d_raw, rows, preds, dens)
    if body is None:
        raise DataError("[evaluate] target labels are required for evaluation")
    _manifest(out, "evaluate", cfg, digest)


def cmd_pipeline(cfg, out, expected_hash=None):
    p = prepare(cfg, expected_hash)
    _write_prepared(out, cfg, p)
    _write_balance(out, p)
    t = train(cfg, p)
    _write_training(out, p, t)
    _write_predictions(out, t)
    _write_outcome_balance(out, cfg, p, t)
    d_raw = _raw_labels(cfg)
    r = t.result
    if t.kind == "supervised":
        _evaluate(out, cfg, d_raw, r.target_index, r.prediction, None)
    else:
        _evaluate(out, cfg, d_raw, r.target_index, None, r.to_json_dict())
    _manifest(out, "pipeline", cfg, p.input_sha256)


@dataclass
class _Run:
    cfg: RunConfig
    rows: np.ndarray
    scores: dict[str, np.ndarray]
    labels: np.ndarray | None


def _load_run(run_dir: Path) -> _Run:
    mpath = run_dir / "manifest.json"
    if not mpath.is_file():
        raise DataError(f"{run_dir}: no manifest.json (not a completed run)")
    cfg, expected = load_config(str(mpath))
    d_raw = _raw_labels(cfg, expected)
    rows, preds = _read_predictions(run_dir / "predictions.csv")
    dens = json.loads((run_dir / "densities.json").read_text()) if cfg.task == "cde" else None
    if d_raw.y is None or not np.all(d_raw.y_observed[rows]):
        raise DataError(f"{run_dir}: target labels unavailable")
    scores, labels = evaluation_scores(cfg, d_raw, rows, preds, dens)
    return _Run(cfg, rows, scores, labels)


def cmd_compare(run_dirs: list[str], n_boot: int, seed: int, out: Outputs) -> None:
    if len(run_dirs) < 2:
        raise ConfigError("compare needs at least two runs")
    if n_boot < 2:
        raise ConfigError("n_boot must be >= 2")
    runs = [_load_run(Path(r)) for r in run_dirs]
    base = runs[0]
    for r in runs[1:]:
        if r.cfg.task != base.cfg.task or not np.array_equal(r.rows, base.rows):
            raise DataError("runs were evaluated on different rows or tasks")
        if base.labels is not None and not np.array_equal(r.labels, base.labels):
            raise DataError("runs were evaluated against different labels")
    rows = []
    with stage("compare"):
        for r in runs:
            for m, s in r.scores.items():
                fn, _ = metrics._metric_fn(m)
                value = fn(s, r.labels)
                se = metrics.bootstrap_se(m, s, r.labels, n_boot, seed)
                rows.append((r.cfg.label, m, value, se, n_boot))
        for r in runs[1:]:
            for m in r.scores:
                fn, _ = metrics._metric_fn(m)
                diff = fn(r.scores[m], r.labels) - fn(base.scores[m], base.labels)
                se = metrics.paired_bootstrap_se(m, r.scores[m], base.scores[m], base.labels, n_boot, seed)
                rows.append((f"{r.cfg.label} - {base.cfg.label}", m, diff, se, n_boot))
    out.write("comparison.csv", _csv_text(["method", "metric", "value", "se", "n_boot"], rows))
    body = {"manifest_version": 1, "command": "compare", "package_version": __version__,
            "runs": list(run_dirs), "n_boot": n_boot, "seed": seed, "outputs": dict(sorted(out.files.items()))}
    (out.root / "manifest.json").write_text(_dump_json(body))


COMMANDS = {
    "simulate": cmd_simulate,
    "propensity": cmd_propensity,
    "stratify": cmd_stratify,
    "weights": cmd_weights,
    "balance": cmd_balance,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stratlearn", description=__doc__.splitlines()[0])
    ap.add_argument("--verbose", "-v", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="run config JSON (a run manifest also works)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--output", help="output directory (overrides the config)")
    cp = sub.add_parser("compare")
    cp.add_argument("--runs", nargs="+", required=True, help="completed run directories")
    cp.add_argument("--n-boot", type=int, default=metrics.DEFAULT_N_BOOT)
    cp.add_argument("--seed", type=int, default=0)
    cp.add_argument("--output", required=True)
    return ap


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            cmd_compare(args.runs, args.n_boot, args.seed, Outputs(Path(args.output)))
            return 0
        cfg, expected = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.validate()
        if args.output is not None:
            cfg.output = args.output
        if not cfg.output:
            raise ConfigError("no output directory (set 'output' or pass --output)")
        out = Outputs(Path(cfg.output))
        if args.command == "simulate":
            cmd_simulate(cfg, out)
        else:
            COMMANDS[args.command](cfg, out, expected)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FitFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())
