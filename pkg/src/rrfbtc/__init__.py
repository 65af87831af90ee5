"""Functional Bayesian tensor completion with multioutput GP priors and automatic rank learning."""

__version__ = "0.1.0"

from .grid import GriddedData, ObservationSet, allocate, build_coord_sets, deallocate
from .kernels import GramMatrix, KernelSpec, gram, kernel_eval, solve_spd
from .predict import FactorPrediction, predict_factors, predict_values, predictive_std
from .vi import FitState, HyperPriors, ModelConfig, NumericalError, fit, init_state

__all__ = [
    "FactorPrediction",
    "FitState",
    "GramMatrix",
    "GriddedData",
    "HyperPriors",
    "KernelSpec",
    "ModelConfig",
    "NumericalError",
    "ObservationSet",
    "allocate",
    "build_coord_sets",
    "deallocate",
    "fit",
    "gram",
    "init_state",
    "kernel_eval",
    "predict_factors",
    "predict_values",
    "predictive_std",
    "solve_spd",
]
