"""Representation-enhanced diffusion: exact finite-state oracles, Gaussian and
vMF closed forms, and a small numpy diffusion trainer with alignment losses."""

from .autodiff import Tensor, backward, grad, grad_check, grad_check_params, no_grad
from .schedules import (
    Curriculum,
    NoiseSchedule,
    WeightSchedule,
    cumulative_weights,
    curriculum_weight,
    make_noise_schedule,
    make_weight_schedule,
)

__version__ = "0.1.0"

__all__ = [
    "Curriculum",
    "NoiseSchedule",
    "Tensor",
    "WeightSchedule",
    "backward",
    "cumulative_weights",
    "curriculum_weight",
    "grad",
    "grad_check",
    "grad_check_params",
    "make_noise_schedule",
    "make_weight_schedule",
    "no_grad",
]
