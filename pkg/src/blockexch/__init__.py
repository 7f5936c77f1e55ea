"""Block-exchangeable covariance estimation for directed network regression."""

from .exceptions import NumericalError, ValidationError
from .netcore import DirectedNetwork, RegressionFit, build_design_matrix, ols_fit
from .covest import (
    BlockAssignment,
    ConfigurationKey,
    CovarianceModel,
    classify_pair,
    enumerate_configurations,
    estimate_block,
    estimate_dc,
    estimate_exchangeable,
    realize_omega,
    sandwich,
    theorem_gap,
)

__all__ = [
    "BlockAssignment",
    "ConfigurationKey",
    "CovarianceModel",
    "DirectedNetwork",
    "NumericalError",
    "RegressionFit",
    "ValidationError",
    "build_design_matrix",
    "classify_pair",
    "enumerate_configurations",
    "estimate_block",
    "estimate_dc",
    "estimate_exchangeable",
    "ols_fit",
    "realize_omega",
    "sandwich",
    "theorem_gap",
]
