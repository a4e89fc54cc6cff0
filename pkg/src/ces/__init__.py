"""Calibrate-emulate-sample toolkit for expensive, noisy forward models.

The workflow has three algorithmic stages: ensemble Kalman inversion finds the
data-consistent region of parameter space while collecting input-output pairs,
per-output Gaussian processes trained on those pairs replace the forward model,
and random-walk Metropolis samples the smoothed posterior through the emulator.
Prediction pushes posterior draws back through the real model.
"""

from .config import PipelineConfig, load_config
from .eki import EkiResult, eki_run, eki_update, ensemble_spread, residual
from .emulator import (GpEmulator, benchmark_grid_train, gp_train,
                       grid_points, predict_physical)
from .exceptions import (CesError, ConfigError, DependencyError, DomainError,
                         EvaluationError, NumericalError)
from .mcmc import (Chain, ChainConfig, PosteriorSummary, phi_mcmc, rwm_core,
                   rwm_sample, split_rhat)
from .models import (CONTROL, CyclicChaosModel, DataLayout, ForwardModel,
                     LinearModel, Scenario)
from .noise import NoiseModel, bounds_from_layout, build_delta, estimate_sigma
from .parameters import ParameterDef, ParameterSpace
from .pipeline import derive_seed, load_manifest, run_stage
from .predict import (PredictionBands, PredictionSpec, control_thresholds,
                      exceedance_frequency, integrated_autocorr_time,
                      percentile_bands, predict_ensemble, thin_indices)

__version__ = "0.1.0"

__all__ = [
    "CONTROL", "CesError", "Chain", "ChainConfig", "ConfigError",
    "CyclicChaosModel", "DataLayout", "DependencyError", "DomainError",
    "EkiResult", "EvaluationError", "ForwardModel", "GpEmulator",
    "LinearModel", "NoiseModel", "NumericalError", "ParameterDef",
    "ParameterSpace", "PipelineConfig", "PosteriorSummary", "PredictionBands",
    "PredictionSpec", "Scenario", "benchmark_grid_train", "bounds_from_layout",
    "build_delta", "control_thresholds", "derive_seed", "eki_run",
    "eki_update", "ensemble_spread", "estimate_sigma", "exceedance_frequency",
    "gp_train", "grid_points", "integrated_autocorr_time", "load_config",
    "load_manifest", "percentile_bands", "phi_mcmc", "predict_ensemble",
    "predict_physical", "residual", "rwm_core", "rwm_sample", "run_stage",
    "split_rhat", "thin_indices",
]
