"""Weighted average treatment effects under two-phase sampling."""

__version__ = "0.1.0"

from .dataset import ColumnRoles, DataError, ObservationTable, build_strata, load_observations
from .estimand import Estimand, weight_and_derivative
from .estimators import Estimator, estimate
from .inference import estimate_variance
from .nuisance import fit_nuisances

__all__ = [
    "ColumnRoles",
    "DataError",
    "Estimand",
    "Estimator",
    "ObservationTable",
    "build_strata",
    "estimate",
    "estimate_variance",
    "fit_nuisances",
    "load_observations",
    "weight_and_derivative",
]
