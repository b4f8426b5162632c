"""Spatial Poisson-lognormal count models fitted by MCMC.

Eleven nested spatial structures (M0-M10) for counts observed along two
shorelines, a Metropolis-within-Gibbs sampler, DIC and proper scoring
rules, and restricted spatial regression.
"""
from .errors import InputError, NumericalError, PlnSpatialError
from .model import MODELS, Dataset, Hyperpriors, ModelConfig, ParameterState, get_model
from .sampler import ChainConfig, PosteriorSample, run_chains

__version__ = "0.1.0"

__all__ = [
    "MODELS",
    "ChainConfig",
    "Dataset",
    "Hyperpriors",
    "InputError",
    "ModelConfig",
    "NumericalError",
    "ParameterState",
    "PlnSpatialError",
    "PosteriorSample",
    "get_model",
    "run_chains",
]
