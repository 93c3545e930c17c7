"""Longitudinal function-on-function regression fitted location by location.

The pipeline fits a penalized mixed model at every outcome location,
smooths the raw coefficient estimates across locations and attaches
analytic or bootstrap confidence bands.
"""

from .data import FitResult, FunctionalDataset, load_dataset_dir, save_dataset, validate
from .inference import (
    ConfidenceBand,
    InferenceResult,
    analytic_inference,
    bootstrap,
    bootstrap_inference,
)
from .pipeline import FittedModel, SmoothingConfig, fit_model
from .pointwise import PointwiseModelConfig, fit_all
from .simulation import Scenario, SimConfig, StudyMethods, generate_dataset, run_study

__version__ = "0.1.0"

__all__ = [
    "ConfidenceBand",
    "FitResult",
    "FittedModel",
    "FunctionalDataset",
    "InferenceResult",
    "PointwiseModelConfig",
    "Scenario",
    "SimConfig",
    "SmoothingConfig",
    "StudyMethods",
    "analytic_inference",
    "bootstrap",
    "bootstrap_inference",
    "fit_all",
    "fit_model",
    "generate_dataset",
    "load_dataset_dir",
    "run_study",
    "save_dataset",
    "validate",
]
