"""Mean-field particle filters: feedback particle filter with stochastically
perturbed innovation, ensemble Kalman-Bucy, bootstrap, ensemble transform and
Sinkhorn particle filters, plus joint state-parameter estimation."""

from .errors import ConfigError, DegenerateEnsembleError, InfeasibleTransportError, MFPFError, NumericalError
from .estimators import JointStateParameterEstimator, ParticleFilter
from .experiment import ExperimentConfig, RunReport, boxplot_stats, example_config, run_experiment
from .filters import FILTERS, FilterConfig, FilterOutput, FilterState, run_filter
from .gain import GainField, compute_gain, constant_gain, kernel_gain
from .joint import ParamDynamics, UniformPrior, augment, extract_param_estimates
from .model import MeasurementIncrementPath, ModelSpec, NoiseBank, get_preset, simulate_truth
from .oracle import kalman_bucy_oracle, stationary_variance
from .transport import TransportPlan, exact_transport, gibbs_kernel, sinkhorn

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DegenerateEnsembleError", "InfeasibleTransportError", "MFPFError", "NumericalError",
    "JointStateParameterEstimator", "ParticleFilter",
    "ExperimentConfig", "RunReport", "boxplot_stats", "example_config", "run_experiment",
    "FILTERS", "FilterConfig", "FilterOutput", "FilterState", "run_filter",
    "GainField", "compute_gain", "constant_gain", "kernel_gain",
    "ParamDynamics", "UniformPrior", "augment", "extract_param_estimates",
    "MeasurementIncrementPath", "ModelSpec", "NoiseBank", "get_preset", "simulate_truth",
    "kalman_bucy_oracle", "stationary_variance",
    "TransportPlan", "exact_transport", "gibbs_kernel", "sinkhorn",
]
