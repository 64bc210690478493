"""Norm-weighted predictive regression with thick-tail-safe inference."""

from .core import (
    ClipPolicy,
    Dataset,
    Design,
    EstimatorKind,
    FitResult,
    build_design,
    cov_least_squares,
    cov_norm_weighted,
    fit,
    fit_least_squares,
    fit_norm_weighted,
    pivot,
    unpack_weighted,
)
from .errors import InputError, NumericError, NwregError
from .quantile import QuantileFit, cov_median, fit_quantile

__version__ = "0.1.0"

__all__ = [
    "ClipPolicy",
    "Dataset",
    "Design",
    "EstimatorKind",
    "FitResult",
    "InputError",
    "NumericError",
    "NwregError",
    "QuantileFit",
    "build_design",
    "cov_least_squares",
    "cov_median",
    "cov_norm_weighted",
    "fit",
    "fit_least_squares",
    "fit_norm_weighted",
    "fit_quantile",
    "pivot",
    "unpack_weighted",
]
