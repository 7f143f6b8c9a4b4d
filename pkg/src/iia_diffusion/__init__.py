"""Diffusion ODE samplers with per-step least-squares (IIA) coefficient calibration."""

from ._backend import BACKEND
from .iia import (
    CalibrationBatch,
    CoefficientTable,
    Variant,
    calibrate,
    fine_oracle,
    iia_step,
    load_table,
    make_calibration_batch,
    save_table,
    solve_least_squares,
)
from .schedule import NoiseParam, TimeGrid, build_grid, noise_level, refine_slot
from .score import GaussianMixture, convert_predictions, guided_prediction, isotropic_gaussian, load_model
from .solvers import DiffusionState, StepRecord, run_sampler

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CalibrationBatch",
    "CoefficientTable",
    "DiffusionState",
    "GaussianMixture",
    "NoiseParam",
    "StepRecord",
    "TimeGrid",
    "Variant",
    "build_grid",
    "calibrate",
    "convert_predictions",
    "fine_oracle",
    "guided_prediction",
    "iia_step",
    "isotropic_gaussian",
    "load_model",
    "load_table",
    "make_calibration_batch",
    "noise_level",
    "refine_slot",
    "run_sampler",
    "save_table",
    "solve_least_squares",
]
