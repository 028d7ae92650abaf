"""Robust reduced-rank mixed-effects FPCA for paired sparse curves."""

from .errors import (
    ConfigError,
    DataError,
    InvalidArgumentError,
    NumericalError,
    RRMEError,
    SelectionFailedError,
)
from .model import FitOptions, FitResult, Lambdas, PairedDataset, ParameterSet, SubjectData, fit
from .smnfamily import MixingFamily
from .splinebasis import make_basis

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "InvalidArgumentError",
    "NumericalError",
    "RRMEError",
    "SelectionFailedError",
    "FitOptions",
    "FitResult",
    "Lambdas",
    "PairedDataset",
    "ParameterSet",
    "SubjectData",
    "fit",
    "MixingFamily",
    "make_basis",
]
