"""Drift-randomised Milstein scheme for interacting particle systems with common noise."""
from ._backend import BACKEND
from .grid import TimeGrid, make_uniform_grid
from .metrics import GridProcessSample, grid_sup_norm, residuals, spijker_norm, w2
from .model import ModelSpec, builtin_model, ensemble_mean, initial_ensemble, probe_lipschitz
from .noise import (
    COMMON,
    NoiseBundle,
    coarsen,
    internal_increment,
    iterated_integral,
    sample_noise,
)
from .schemes import (
    Trajectory,
    euler_step,
    milstein_increment,
    milstein_step,
    predictor_step,
    simulate,
)

__version__ = "0.1.0"
