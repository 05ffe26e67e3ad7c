"""Self-modulated reservoir computing.

A gated echo-state network in which two scalar gates, fed back from the
reservoir state, modulate the input strength and the effective spectral
radius at every timestep.  The package bundles the dynamics, the
two-phase training loop (pseudo-inverse readout + BPTT on the gates),
benchmark task generators, perturbation-based sensitivity analysis, a
scikit-learn style estimator, and an experiment CLI (``smrc``).
"""

from .core import (
    GateMode,
    GateParams,
    Model,
    ModelConfig,
    ReadoutParams,
    ReservoirParams,
    Trajectory,
    derive_rng,
    gate_activation,
    gate_activation_derivative,
    init_gates,
    init_reservoir,
    run,
    spectral_radius,
    step,
)
from .estimator import SMRCRegressor
from .tasks import Dataset, TaskSample, gen_attention, gen_lorenz, gen_narma
from .training import (
    TrainConfig,
    adam_update,
    fit_readout,
    train_once,
    train_restarts,
)
from .analysis import (
    SensitivityConfig,
    SensitivityProfile,
    ensemble_stats,
    mse_report,
    sample_perturbations,
    sensitivity,
)

__all__ = [
    "GateMode",
    "GateParams",
    "Model",
    "ModelConfig",
    "ReadoutParams",
    "ReservoirParams",
    "Trajectory",
    "SMRCRegressor",
    "Dataset",
    "TaskSample",
    "TrainConfig",
    "SensitivityConfig",
    "SensitivityProfile",
    "adam_update",
    "derive_rng",
    "ensemble_stats",
    "fit_readout",
    "gate_activation",
    "gate_activation_derivative",
    "gen_attention",
    "gen_lorenz",
    "gen_narma",
    "init_gates",
    "init_reservoir",
    "mse_report",
    "run",
    "sample_perturbations",
    "sensitivity",
    "spectral_radius",
    "step",
    "train_once",
    "train_restarts",
]

__version__ = "0.1.0"
