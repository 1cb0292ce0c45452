"""Variational continual learning with n-step KL and TD(lambda) objectives."""
from .kernels import BACKEND
from .numcore import ContractError, DimensionError, NumericError, SeededRng
from .objectives import (Batch, CoefficientSchedule, ObjectiveSpec, compound_identity_residual,
                         evaluate_objective, nstep_coefficients, td_target, tdlambda_coefficients)
from .vardist import GaussianPrior, MeanFieldGaussian, PosteriorHistory, PosteriorSnapshot

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ContractError", "DimensionError", "NumericError", "SeededRng",
    "Batch", "CoefficientSchedule", "ObjectiveSpec", "compound_identity_residual",
    "evaluate_objective", "nstep_coefficients", "td_target", "tdlambda_coefficients",
    "GaussianPrior", "MeanFieldGaussian", "PosteriorHistory", "PosteriorSnapshot",
]
