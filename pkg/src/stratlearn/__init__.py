"""Propensity-score stratified learning under covariate shift."""

from stratlearn.errors import (
    ConfigError,
    DataError,
    DegenerateStrataError,
    FitFailure,
    StratLearnError,
)
from stratlearn.tabular import Dataset, ShiftSpec, Standardization, load_csv, simulate_shift, standardize
from stratlearn.propensity import PropensityModel, fit_propensity, predict_propensity
from stratlearn.strata import StrataAssignment, merge_small_strata, strata_report, stratify

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "Dataset",
    "DegenerateStrataError",
    "FitFailure",
    "PropensityModel",
    "ShiftSpec",
    "Standardization",
    "StrataAssignment",
    "StratLearnError",
    "fit_propensity",
    "load_csv",
    "merge_small_strata",
    "predict_propensity",
    "simulate_shift",
    "standardize",
    "strata_report",
    "stratify",
]
