"""Ensemble data assimilation toolkit: LETKF with covariance relaxation, observation
thinning and preprocessing, verification metrics, toy forecast models and a cycling driver."""

from .config import ExperimentConfig, load_config
from .cycle import run_cycle_experiment, run_forecast_experiment
from .letkf import DaConfig, letkf_analysis
from .state import EnsembleState

__all__ = ["DaConfig", "EnsembleState", "ExperimentConfig", "letkf_analysis", "load_config",
           "run_cycle_experiment", "run_forecast_experiment"]
__version__ = "0.1.0"
