"""Exception hierarchy. The CLI maps these onto exit codes."""


class StratLearnError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(StratLearnError):
    """Invalid or inconsistent run configuration."""


class DataError(StratLearnError):
    """Input data violates a contract (bad cell, missing column, wrong shape)."""


class DegenerateStrataError(DataError):
    """Propensity scores cannot be split into the requested number of strata."""


class FitFailure(StratLearnError):
    """A numerical fit did not produce a usable result."""
