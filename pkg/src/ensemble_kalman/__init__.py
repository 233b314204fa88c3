"""Ensemble Kalman methods for filtering and inverse problems."""

from .gaussian_core import (
    DEFAULT_SCALING,
    Ensemble,
    EnsembleKalmanError,
    Gaussian,
    JointGaussian,
    NumericalFailure,
    SeededStream,
    condition_joint,
    empirical_moments,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_SCALING",
    "Ensemble",
    "EnsembleKalmanError",
    "Gaussian",
    "JointGaussian",
    "NumericalFailure",
    "SeededStream",
    "condition_joint",
    "empirical_moments",
]
