"""Variational multi-object tracking under a non-homogeneous Poisson measurement model."""

from .cavi import CaviSettings, GaussianBeliefs, RateBelief, TrackerState, VBTracker, known_rate_step, tracker_step
from .experiment import ExperimentConfig, run_experiment
from .management import LossDetectorConfig, ReloSettings, initial_relo_state, relo_step
from .metrics import OspaConfig, ospa, summarize
from .model import ConfigError, MeasurementFrame, MeasurementModel, RateVector, Region, TransitionModel
from .scenario import ScenarioConfig, generate_frames, generate_truth, preset

__all__ = [
    "CaviSettings", "GaussianBeliefs", "RateBelief", "TrackerState", "VBTracker", "known_rate_step",
    "tracker_step", "ExperimentConfig", "run_experiment", "LossDetectorConfig", "ReloSettings",
    "initial_relo_state", "relo_step", "OspaConfig", "ospa", "summarize", "ConfigError",
    "MeasurementFrame", "MeasurementModel", "RateVector", "Region", "TransitionModel",
    "ScenarioConfig", "generate_frames", "generate_truth", "preset",
]
__version__ = "0.1.0"
